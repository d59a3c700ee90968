"""Learners for task-incremental learning with per-task unlearning.

Shared-subnetwork methods ("subnet", "static_sparse", "dynamic_sparse")
train one parameter vector under per-task bit masks and unlearn exactly:
every parameter a task's data wrote is reset to a fresh init draw, and for
the subnet method the entries shared with later tasks are then retrained
from the remaining replay buffers.  "sequential", "er"/"derpp" and
"independent" are reference baselines.

Determinism contract: every random draw is keyed by (master seed, task,
purpose), never by request position, so dropping a learn/unlearn pair from
a sequence leaves all other tasks' draws unchanged.  On top of that, each
learn starts by redrawing all unfrozen parameters from the incoming task's
init stream.  Both together make rewinding exact: running
[... learn t, unlearn t, suffix ...] leaves every retained mask, buffer,
and masked parameter bit-identical to the run without the pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import net, rehearsal
from .masking import (BitMask, CapacityError, MaskRegistry, ProvenanceLedger,
                      ScoreStore, affected_params, init_scores, layer_budget,
                      ste_score_grad, topk_mask)
from .metrics import AccuracyMatrix, audit_unlearning
from .net import MlpArch, ParamStore, build_mlp
from .optim import apply_update, make_optimizer
from .rng import StreamSet
from .scenario import Request, TaskSuite, validate_sequence

METHODS = ("subnet", "sequential", "independent", "er", "derpp",
           "static_sparse", "dynamic_sparse")
EXACT_METHODS = ("subnet", "independent", "static_sparse", "dynamic_sparse")


class RequestError(ValueError):
    """A request that the current learner state cannot accept."""


class UnknownTaskError(KeyError):
    """Prediction asked for a task this learner has never seen."""


@dataclass
class Hyperparams:
    alpha: float | None = None  # mask density; None means 1 / task_count
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    optimizer: str = "sgd_momentum"
    n_retrain: int = 50
    beta: float = 0.5
    buffer_total: int = 500
    hidden: tuple = (64, 64)

    def validate(self) -> None:
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.n_retrain < 0:
            raise ValueError("n_retrain must be >= 0")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RetrainEvent:
    """Bookkeeping for one unlearn request."""

    task: int
    reset_count: int    # entries reset to fresh draws
    shared_count: int   # entries shared with later tasks and retrained
    steps: int
    mean_abs_diff: float  # mean |after - reset| over the shared entries


def _minibatches(n: int, batch_size: int, stream):
    order = stream.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


class BaseLearner:
    method = "base"
    keeps_masks = False   # exact methods answer unlearned tasks at random

    def __init__(self, suite: TaskSuite, hp: Hyperparams, master_seed: int):
        hp.validate()
        self.hp = hp
        self.task_count = suite.task_count
        self.alpha = hp.alpha if hp.alpha is not None else 1.0 / self.task_count
        self.arch: MlpArch = build_mlp(suite.input_dim, tuple(hp.hidden),
                                       suite.classes_per_task, self.task_count)
        self.master_seed = int(master_seed)
        self.streams = StreamSet(master_seed)
        self.omega: list[int] = []       # currently learned, in learn order
        self.ever_learned: set[int] = set()
        self.retrain_events: list[RetrainEvent] = []

    # -- request surface ---------------------------------------------------
    def learn(self, task: int, data) -> None:
        if task in self.ever_learned:
            raise RequestError(f"task {task} was already learned once")
        if not 1 <= task <= self.task_count:
            raise RequestError(f"task {task} outside 1..{self.task_count}")
        self._learn(task, data)
        self.omega.append(task)
        self.ever_learned.add(task)

    def unlearn(self, task: int) -> None:
        if task not in self.omega:
            raise RequestError(f"task {task} is not currently learned")
        self._unlearn(task)
        self.omega.remove(task)

    @property
    def unlearned(self) -> set[int]:
        return self.ever_learned - set(self.omega)

    def stream(self, task: int, purpose: str):
        return self.streams.stream(task, purpose)

    # -- prediction ---------------------------------------------------------
    def predict(self, task: int, x: np.ndarray) -> np.ndarray:
        if task not in self.ever_learned:
            raise UnknownTaskError(f"task {task} was never learned")
        if self.keeps_masks and task not in self.omega:
            # Exact methods hold nothing about an unlearned task: answer at
            # chance from a dedicated evaluation stream.
            n = np.atleast_2d(np.asarray(x)).shape[0]
            return self.stream(task, "eval").randints(n, self.arch.classes_per_task)
        return self._predict(task, x)

    def eval_task(self, task: int, x: np.ndarray, y: np.ndarray):
        labels = self.predict(task, x)
        return int((labels == np.asarray(y)).sum()), int(len(y))

    def evaluate_suite(self, suite: TaskSuite) -> dict:
        return {t: self.eval_task(t, d.x_test, d.y_test)
                for t, d in sorted(suite.tasks.items()) if t in self.ever_learned}

    # -- shared training loop pieces -----------------------------------------
    def _dense_update_bits(self, task: int) -> np.ndarray:
        """Hidden layers plus the active task's head; other heads stay frozen."""
        bits = self.arch.maskable_bits()
        bits |= self.arch.head_bits(task)
        return bits

    def _make_opt(self, decay: float | None = None):
        wd = self.hp.weight_decay if decay is None else decay
        return make_optimizer(self.hp.optimizer, self.arch.d, self.hp.lr,
                              self.hp.momentum, wd)


class MaskedLearner(BaseLearner):
    """Single shared store plus per-task masks and provenance tracking."""

    keeps_masks = True
    uses_buffers = False

    def __init__(self, suite, hp, master_seed):
        super().__init__(suite, hp, master_seed)
        self.params = net.init_params(self.arch, self.stream(0, "param_init"))
        self.registry = MaskRegistry(self.arch.d)
        self.ledger = ProvenanceLedger(self.arch.d)
        self.union_bits = np.zeros(self.arch.d, dtype=bool)
        self.buffers: dict[int, rehearsal.ReplayBuffer] = {}
        self.buffer_capacity = rehearsal.per_task_capacity(hp.buffer_total, self.task_count)

    def _learn(self, task: int, data) -> None:
        free = ~self.union_bits
        net.resample(self.params, free, self.stream(task, "param_init"))
        mask = self._train_subnetwork(task, data, free)
        self.registry.add(task, mask)
        self.ledger.record(task, BitMask(mask.bits & free))
        self.union_bits = self.union_bits | mask.bits
        assert np.array_equal(self.union_bits, self.registry.union().bits)
        if self.uses_buffers:
            self.buffers[task] = rehearsal.fill_buffer(
                data.x_train, data.y_train, self.params, mask.bits, task,
                self.buffer_capacity, self.stream(task, "buffer_sample"))
        net.resample(self.params, ~self.union_bits, self.stream(task, "reinit_unused"))

    def _unlearn(self, task: int) -> None:
        if self.uses_buffers:
            rehearsal.delete_buffer(self.buffers, task)
        owned = self.ledger.owned(task)
        net.resample(self.params, owned.bits, self.stream(task, "unlearn_reset"))
        remaining = [t for t in self.omega if t != task]
        shared = affected_params(self.registry, self.ledger, task, remaining)
        steps = 0
        diff = 0.0
        if shared.any():
            reset_vals = self.params.values[shared.bits].copy()
            if self.uses_buffers and self.hp.n_retrain > 0:
                steps = self.hp.n_retrain
                self._retrain_shared(task, shared)
            diff = float(np.abs(self.params.values[shared.bits] - reset_vals).mean())
        self.ledger.erase(owned)
        self.ledger.clear(task)
        if steps:
            for tau in remaining:
                if tau > task:
                    self.ledger.record(tau, BitMask(shared.bits & self.registry.get(tau).bits))
        self.registry.remove(task)
        self.union_bits = self.registry.union().bits
        self.retrain_events.append(RetrainEvent(task, owned.count(), shared.count(), steps, diff))

    def _retrain_shared(self, task: int, shared: BitMask) -> None:
        """Recover later tasks' use of the reset entries from their buffers."""
        retrain_tasks = [t for t in self.omega if t > task and t != task]
        masks = {t: self.registry.get(t).bits for t in retrain_tasks}
        opt = self._make_opt()
        for _ in range(self.hp.n_retrain):
            grads = np.zeros(self.arch.d, dtype=np.float64)
            batches = rehearsal.draw_replay_batches(
                self.buffers, retrain_tasks, self.hp.batch_size,
                lambda t: self.stream(t, "retrain_order"))
            for tau in sorted(batches):
                xb, yb, zb = batches[tau]
                logits, trace = net.forward_trace(self.params, masks[tau], tau, xb)
                _, dce = net.cross_entropy_grad(logits, yb)
                _, dmse = net.logit_mse_grad(logits, zb)
                grads += net.backward(trace, dce + self.hp.beta * dmse).params
            apply_update(self.params.values, grads, opt, shared.bits)

    def _score_train(self, task: int, data, free: np.ndarray,
                     eligible: np.ndarray | None) -> BitMask:
        """Optimize selection scores jointly with unfrozen weights."""
        scores = init_scores(self.arch, self.stream(task, "score_init"))
        score_bits = scores.maskable if eligible is None else eligible
        opt_w = self._make_opt()
        opt_s = self._make_opt(decay=0.0)
        n = data.x_train.shape[0]
        for _ in range(self.hp.epochs):
            for idx in _minibatches(n, self.hp.batch_size, self.stream(task, "data_order")):
                mask = topk_mask(scores, self.alpha, self.arch, task, eligible)
                logits, trace = net.forward_trace(self.params, mask.bits, task,
                                                  data.x_train[idx])
                _, dlogits = net.cross_entropy_grad(logits, data.y_train[idx])
                g = net.backward(trace, dlogits)
                apply_update(self.params.values, g.params, opt_w, free)
                sg = ste_score_grad(g.effective, self.params, score_bits)
                apply_update(scores.values, sg, opt_s, score_bits)
        return topk_mask(scores, self.alpha, self.arch, task, eligible)

    def _predict(self, task: int, x: np.ndarray) -> np.ndarray:
        logits = net.forward(self.params, self.registry.get(task).bits, task, x)
        return np.argmax(logits, axis=1)


class SubnetLearner(MaskedLearner):
    """Top-k subnetworks that may reuse frozen weights; replay-based repair."""

    method = "subnet"
    uses_buffers = True

    def _train_subnetwork(self, task, data, free):
        return self._score_train(task, data, free, eligible=None)


class DynamicSparseLearner(MaskedLearner):
    """Score-chosen subnetworks restricted to still-free entries (disjoint)."""

    method = "dynamic_sparse"

    def __init__(self, suite, hp, master_seed):
        super().__init__(suite, hp, master_seed)
        if self.alpha > 1.0 / self.task_count + 1e-12:
            raise CapacityError(
                f"alpha {self.alpha:g} cannot fit {self.task_count} disjoint masks; "
                "need alpha <= 1/task_count")

    def _train_subnetwork(self, task, data, free):
        eligible = free & self.arch.maskable_bits()
        return self._score_train(task, data, free, eligible)


class StaticSparseLearner(MaskedLearner):
    """Random fixed disjoint subnetwork per task."""

    method = "static_sparse"

    def __init__(self, suite, hp, master_seed):
        super().__init__(suite, hp, master_seed)
        if self.alpha > 1.0 / self.task_count + 1e-12:
            raise CapacityError(
                f"alpha {self.alpha:g} cannot fit {self.task_count} disjoint masks; "
                "need alpha <= 1/task_count")

    def _train_subnetwork(self, task, data, free):
        bits = np.zeros(self.arch.d, dtype=bool)
        stream = self.stream(task, "score_init")
        for layer in self.arch.maskable_layers():
            k = layer_budget(self.alpha, layer.size)
            pool = np.arange(layer.start, layer.stop)[free[layer.start : layer.stop]]
            if pool.size < k:
                raise CapacityError(
                    f"layer {layer.name}: need {k} free entries, only {pool.size} left")
            bits[pool[stream.subset(pool.size, k)]] = True
        bits[self.arch.head_bits(task)] = True
        mask = BitMask(bits)
        opt = self._make_opt()
        n = data.x_train.shape[0]
        for _ in range(self.hp.epochs):
            for idx in _minibatches(n, self.hp.batch_size, self.stream(task, "data_order")):
                logits, trace = net.forward_trace(self.params, mask.bits, task,
                                                  data.x_train[idx])
                _, dlogits = net.cross_entropy_grad(logits, data.y_train[idx])
                g = net.backward(trace, dlogits)
                apply_update(self.params.values, g.params, opt, mask.bits)
        return mask


class SequentialLearner(BaseLearner):
    """One dense model trained task after task; unlearning only edits the books."""

    method = "sequential"

    def __init__(self, suite, hp, master_seed):
        super().__init__(suite, hp, master_seed)
        self.params = net.init_params(self.arch, self.stream(0, "param_init"))

    def _learn(self, task, data) -> None:
        update_bits = self._dense_update_bits(task)
        opt = self._make_opt()
        n = data.x_train.shape[0]
        for _ in range(self.hp.epochs):
            for idx in _minibatches(n, self.hp.batch_size, self.stream(task, "data_order")):
                self._step(task, data.x_train[idx], data.y_train[idx], opt, update_bits)

    def _step(self, task, xb, yb, opt, update_bits) -> None:
        logits, trace = net.forward_trace(self.params, None, task, xb)
        _, dlogits = net.cross_entropy_grad(logits, yb)
        g = net.backward(trace, dlogits)
        apply_update(self.params.values, g.params, opt, update_bits)

    def _unlearn(self, task) -> None:
        pass  # parameters keep whatever they learned

    def _predict(self, task, x):
        return np.argmax(net.forward(self.params, None, task, x), axis=1)


class ReplayLearner(SequentialLearner):
    """Dense model with replay buffers; beta > 0 adds the stored-logit term."""

    method = "er"

    def __init__(self, suite, hp, master_seed, beta: float = 0.0):
        super().__init__(suite, hp, master_seed)
        self.beta = beta
        self.buffers: dict[int, rehearsal.ReplayBuffer] = {}
        self.buffer_capacity = rehearsal.per_task_capacity(hp.buffer_total, self.task_count)

    def _replay_grads(self, exclude: int | None = None) -> np.ndarray:
        grads = np.zeros(self.arch.d, dtype=np.float64)
        tasks = [t for t in self.buffers if t != exclude]
        if tasks:
            batches = rehearsal.draw_replay_batches(
                self.buffers, tasks, self.hp.batch_size,
                lambda t: self.stream(t, "retrain_order"))
            for tau in sorted(batches):
                xb, yb, zb = batches[tau]
                logits, trace = net.forward_trace(self.params, None, tau, xb)
                _, dce = net.cross_entropy_grad(logits, yb)
                _, dmse = net.logit_mse_grad(logits, zb)
                grads += net.backward(trace, dce + self.beta * dmse).params
        return grads

    def _learn(self, task, data) -> None:
        update_bits = self._dense_update_bits(task)
        opt = self._make_opt()
        n = data.x_train.shape[0]
        for _ in range(self.hp.epochs):
            for idx in _minibatches(n, self.hp.batch_size, self.stream(task, "data_order")):
                logits, trace = net.forward_trace(self.params, None, task, data.x_train[idx])
                _, dlogits = net.cross_entropy_grad(logits, data.y_train[idx])
                grads = net.backward(trace, dlogits).params + self._replay_grads()
                apply_update(self.params.values, grads, opt, update_bits)
        self.buffers[task] = rehearsal.fill_buffer(
            data.x_train, data.y_train, self.params, None, task,
            self.buffer_capacity, self.stream(task, "buffer_sample"))

    def _unlearn(self, task) -> None:
        # Finetune toward chance on the departing task's buffer while replaying
        # the others, then drop that buffer.
        update_bits = self._dense_update_bits(task)
        opt = self._make_opt()
        for _ in range(self.hp.n_retrain):
            xb, _, _ = rehearsal.sample_batch(self.buffers[task], self.hp.batch_size,
                                              self.stream(task, "retrain_order"))
            logits, trace = net.forward_trace(self.params, None, task, xb)
            _, dlogits = net.uniform_cross_entropy_grad(logits)
            grads = net.backward(trace, dlogits).params + self._replay_grads(exclude=task)
            apply_update(self.params.values, grads, opt, update_bits)
        rehearsal.delete_buffer(self.buffers, task)


class DistillingReplayLearner(ReplayLearner):
    """Replay with the stored-logit distillation term switched on."""

    method = "derpp"

    def __init__(self, suite, hp, master_seed):
        super().__init__(suite, hp, master_seed, beta=hp.beta)


class IndependentLearner(BaseLearner):
    """A fresh model per task; unlearning deletes the model outright."""

    method = "independent"
    keeps_masks = True  # holds nothing for unlearned tasks, answers at chance

    def __init__(self, suite, hp, master_seed):
        super().__init__(suite, hp, master_seed)
        self.stores: dict[int, ParamStore] = {}

    def _learn(self, task, data) -> None:
        params = net.init_params(self.arch, self.stream(task, "param_init"))
        update_bits = self._dense_update_bits(task)
        opt = self._make_opt()
        n = data.x_train.shape[0]
        for _ in range(self.hp.epochs):
            for idx in _minibatches(n, self.hp.batch_size, self.stream(task, "data_order")):
                logits, trace = net.forward_trace(params, None, task, data.x_train[idx])
                _, dlogits = net.cross_entropy_grad(logits, data.y_train[idx])
                g = net.backward(trace, dlogits)
                apply_update(params.values, g.params, opt, update_bits)
        self.stores[task] = params

    def _unlearn(self, task) -> None:
        del self.stores[task]

    def _predict(self, task, x):
        return np.argmax(net.forward(self.stores[task], None, task, x), axis=1)


def make_learner(method: str, suite: TaskSuite, hp: Hyperparams,
                 master_seed: int) -> BaseLearner:
    if method == "subnet":
        return SubnetLearner(suite, hp, master_seed)
    if method == "sequential":
        return SequentialLearner(suite, hp, master_seed)
    if method == "independent":
        return IndependentLearner(suite, hp, master_seed)
    if method == "er":
        return ReplayLearner(suite, hp, master_seed)
    if method == "derpp":
        return DistillingReplayLearner(suite, hp, master_seed)
    if method == "static_sparse":
        return StaticSparseLearner(suite, hp, master_seed)
    if method == "dynamic_sparse":
        return DynamicSparseLearner(suite, hp, master_seed)
    raise ValueError(f"unknown method {method!r}; pick one of {METHODS}")


def process_request(learner: BaseLearner, request: Request, suite: TaskSuite,
                    matrix: AccuracyMatrix) -> None:
    """Apply one request, then score every ever-seen task's test set."""
    if request.kind == "learn":
        learner.learn(request.task, suite.tasks[request.task])
    else:
        learner.unlearn(request.task)
    matrix.append(request, list(learner.omega), learner.evaluate_suite(suite))


def run_sequence(method: str, suite: TaskSuite, hp: Hyperparams, master_seed: int,
                 sequence) -> tuple[BaseLearner, AccuracyMatrix]:
    bad = validate_sequence(sequence)
    if bad is not None:
        raise RequestError(f"invalid sequence at request {bad[0]}: {bad[1]}")
    learner = make_learner(method, suite, hp, master_seed)
    matrix = AccuracyMatrix()
    matrix.append(None, [], {})  # pre-run row
    for request in sequence:
        process_request(learner, request, suite, matrix)
    return learner, matrix


def audit_learner(learner: BaseLearner) -> list[str]:
    """Run the exact-unlearning audit against a learner's live state."""
    ledger = getattr(learner, "ledger", None) or ProvenanceLedger(learner.arch.d)
    problems = audit_unlearning(ledger, learner.unlearned,
                                getattr(learner, "buffers", None),
                                getattr(learner, "registry", None))
    if isinstance(learner, IndependentLearner):
        problems += [f"task {t}: model still stored" for t in sorted(learner.unlearned)
                     if t in learner.stores]
    return problems


def state_diffs(a: BaseLearner, b: BaseLearner, suite: TaskSuite) -> list[str]:
    """Differences between two learners' visible state; empty means bit-equal.

    Compares registered masks, buffers, parameters under the mask union, and
    predictions for every task still learned.
    """
    diffs: list[str] = []
    if a.omega != b.omega:
        diffs.append(f"learned sets differ: {a.omega} vs {b.omega}")
        return diffs
    full_l, cut_l = a, b
    if isinstance(full_l, MaskedLearner):
        if full_l.registry.tasks() != cut_l.registry.tasks():
            diffs.append("mask registries cover different tasks")
        else:
            for t in full_l.registry.tasks():
                if full_l.registry.get(t) != cut_l.registry.get(t):
                    diffs.append(f"mask for task {t} differs")
        union = full_l.registry.union().bits
        if not np.array_equal(full_l.params.values[union], cut_l.params.values[union]):
            diffs.append("parameters under the mask union differ")
        for t in sorted(set(full_l.buffers) | set(getattr(cut_l, "buffers", {}))):
            a, b = full_l.buffers.get(t), cut_l.buffers.get(t)
            if a is None or b is None:
                diffs.append(f"buffer presence differs for task {t}")
            elif not (np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
                      and np.array_equal(a.z, b.z)):
                diffs.append(f"buffer for task {t} differs")
    if isinstance(full_l, IndependentLearner):
        for t in full_l.omega:
            if not np.array_equal(full_l.stores[t].values, cut_l.stores[t].values):
                diffs.append(f"model for task {t} differs")
    for t in full_l.omega:
        d = suite.tasks[t]
        if not np.array_equal(full_l.predict(t, d.x_test), cut_l.predict(t, d.x_test)):
            diffs.append(f"predictions for task {t} differ")
    return diffs


def rewind_oracle(method: str, suite: TaskSuite, hp: Hyperparams, master_seed: int,
                  sequence, pair_task: int) -> list[str]:
    """Differences between running the sequence and running it without the
    adjacent learn/unlearn pair for ``pair_task``; empty list means bit-equal."""
    seq = list(sequence)
    idx = [i for i, r in enumerate(seq) if r.task == pair_task]
    if (len(idx) != 2 or seq[idx[0]].kind != "learn" or seq[idx[1]].kind != "unlearn"
            or idx[1] != idx[0] + 1):
        raise ValueError("sequence must contain exactly learn+unlearn of the pair "
                         "task, adjacent, and no other request for it")
    shorter = seq[: idx[0]] + seq[idx[1] + 1 :]
    full_l, _ = run_sequence(method, suite, hp, master_seed, seq)
    cut_l, _ = run_sequence(method, suite, hp, master_seed, shorter)
    return state_diffs(full_l, cut_l, suite)
