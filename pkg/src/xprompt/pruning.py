"""Importance scoring, structured mask selection, and hierarchical pruning.

Token scores are means over training batches of |dL/d gamma_i|; piece scores
are the same statistic for zeta entries, recomputed on the tokens that survive
token-level pruning. Selection removes floor(ratio * live) structures under a
documented, deterministic tie-break, and rewinding restores surviving prompt
entries to the snapshot before retraining.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .backbone import FrozenBackbone
from .errors import ConfigError, DataError, StateError
from .optim import OptimizerState, make_optimizer
from .prompt import InitStrategy, PromptBank, TuneResult, batch_loss, evaluate, init_prompt, tune
from .util import stable_seed

log = logging.getLogger("xprompt.pruning")

AGGREGATIONS = ("per_batch_abs", "per_example_abs")
RULES = ("lowest_score", "random", "reversed")

SCORE_BATCH = 16


# --- importance reports ---------------------------------------------------------


@dataclass
class ImportanceReport:
    """Nonnegative sensitivity scores with liveness flags.

    Structures that were already pruned when the report was taken carry a
    score of exactly 0 and a False flag.
    """

    token_scores: np.ndarray       # (m,)
    piece_scores: np.ndarray       # (m, k)
    token_live: np.ndarray         # (m,) bool
    piece_live: np.ndarray         # (m, k) bool
    batches_seen: int
    aggregation: str

    def validate(self) -> None:
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")
        if self.batches_seen < 1:
            raise ConfigError("a report needs at least one scored batch")
        if (self.token_scores < 0).any() or (self.piece_scores < 0).any():
            raise ConfigError("importance scores must be nonnegative")


def _score_batches(bank: PromptBank, bb: FrozenBackbone, train, agg: str,
                   batch_size: int):
    """Yield (token |grad|, piece |grad|) per batch, in dataset order."""
    if agg not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {agg!r}; expected one of {AGGREGATIONS}")
    if not train:
        raise DataError("cannot score importance on an empty dataset")
    step = 1 if agg == "per_example_abs" else batch_size
    for lo in range(0, len(train), step):
        loss, g = batch_loss(bank, bb, train[lo:lo + step])
        ag.backward(loss)
        yield np.abs(g.token_mask.grad[:, 0]), np.abs(g.piece_mask.grad)


def score_tokens(bank: PromptBank, bb: FrozenBackbone, train,
                 agg: str = "per_batch_abs", batch_size: int = SCORE_BATCH) -> ImportanceReport:
    """Token importance: mean over batches of |dL/d gamma_i| at the current masks."""
    tok = np.zeros(bank.m)
    pc = np.zeros((bank.m, bank.k))
    n = 0
    for t, p in _score_batches(bank, bb, train, agg, batch_size):
        tok += t
        pc += p
        n += 1
    token_live = bank.token_mask > 0
    piece_live = token_live[:, None] & (bank.piece_mask > 0)
    tok = np.where(token_live, tok / n, 0.0)
    pc = np.where(piece_live, pc / n, 0.0)
    return ImportanceReport(tok, pc, token_live, piece_live, n, agg)


def score_pieces(bank: PromptBank, bb: FrozenBackbone, train,
                 agg: str = "per_batch_abs", batch_size: int = SCORE_BATCH) -> ImportanceReport:
    """Piece importance over zeta entries of surviving tokens.

    Identical sweep to score_tokens; kept separate because the hierarchical
    procedure rescoring happens after token masks have changed.
    """
    return score_tokens(bank, bb, train, agg, batch_size)


# --- selections -----------------------------------------------------------------


@dataclass(frozen=True)
class MaskSelection:
    """Surviving structure, the ratios that produced it, and mask geometry."""

    kept_tokens: frozenset[int]
    kept_pieces: dict[int, frozenset[int]]
    token_ratio: float
    piece_ratio: float
    m: int
    k: int

    def to_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(gamma, zeta) as 0/1 arrays; rows of removed tokens are all zero."""
        gamma = np.zeros(self.m)
        zeta = np.zeros((self.m, self.k))
        for t in self.kept_tokens:
            gamma[t] = 1.0
            for q in self.kept_pieces.get(t, ()):
                zeta[t, q] = 1.0
        return gamma, zeta

    def kept_cells(self) -> int:
        return sum(len(q) for q in self.kept_pieces.values())


def _removal_count(ratio: float, live: int) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"pruning ratio must be in [0, 1), got {ratio}")
    return int(np.floor(ratio * live))


def _pick(order_key, candidates, p: int, rule: str, seed: int, stream: str):
    """Indices to remove: p candidates under the given rule.

    lowest_score removes the lowest scores, ties to the lower index first;
    reversed removes the highest scores, ties to the higher index first, so
    the two rules remove disjoint sets whenever 2p <= live count; random is
    a seeded uniform draw.
    """
    if rule not in RULES:
        raise ConfigError(f"unknown selection rule {rule!r}; expected one of {RULES}")
    if rule == "random":
        rng = np.random.default_rng(stable_seed(seed, "select", stream))
        picked = rng.permutation(len(candidates))[:p]
        return [candidates[int(i)] for i in picked]
    ranked = sorted(candidates, key=order_key, reverse=(rule == "reversed"))
    return ranked[:p]


def select_tokens(report: ImportanceReport, ratio: float, rule: str,
                  seed: int = 0) -> MaskSelection:
    """Token-level selection over live tokens; kept tokens keep all live pieces."""
    live = [int(i) for i in np.flatnonzero(report.token_live)]
    p = _removal_count(ratio, len(live))
    removed = set(_pick(lambda i: (report.token_scores[i], i), live, p, rule,
                        seed, "tokens"))
    kept = frozenset(i for i in live if i not in removed)
    pieces = {i: frozenset(int(q) for q in np.flatnonzero(report.piece_live[i]))
              for i in kept}
    m, k = report.piece_scores.shape
    return MaskSelection(kept, pieces, ratio, 0.0, m, k)


def select_pieces(report: ImportanceReport, ratio: float, rule: str,
                  seed: int = 0, base: MaskSelection | None = None) -> MaskSelection:
    """Piece-level selection pooled globally across all live cells.

    The removal budget is floor(ratio * live cell count) over every
    (token, piece) cell that is still live, not a per-token quota.
    """
    cells = [(int(t), int(q)) for t, q in zip(*np.nonzero(report.piece_live))]
    p = _removal_count(ratio, len(cells))
    removed = set(_pick(lambda c: (report.piece_scores[c], c), cells, p, rule,
                        seed, "pieces"))
    kept_tokens = frozenset(int(i) for i in np.flatnonzero(report.token_live))
    pieces = {t: frozenset(q for (tt, q) in cells if tt == t and (tt, q) not in removed)
              for t in kept_tokens}
    m, k = report.piece_scores.shape
    token_ratio = base.token_ratio if base is not None else 0.0
    return MaskSelection(kept_tokens, pieces, token_ratio, ratio, m, k)


def apply_selection(bank: PromptBank, selection: MaskSelection) -> None:
    if (selection.m, selection.k) != (bank.m, bank.k):
        raise ConfigError(
            f"selection geometry ({selection.m}, {selection.k}) does not match "
            f"bank ({bank.m}, {bank.k})")
    gamma, zeta = selection.to_masks()
    bank.token_mask[:] = gamma
    bank.piece_mask[:] = zeta


def rewind(bank: PromptBank, selection: MaskSelection,
           opt: OptimizerState | None = None) -> None:
    """Reset surviving prompt entries to the snapshot and install the masks."""
    if bank.snapshot is None:
        raise StateError("rewinding requires a snapshot")
    bank.restore_snapshot()
    apply_selection(bank, selection)
    if opt is not None:
        opt.reset()


# --- hierarchical pruning -------------------------------------------------------


@dataclass(frozen=True)
class PruneSchedule:
    token_ratios: tuple[float, ...]
    piece_ratios: tuple[float, ...]
    rule: str = "lowest_score"
    seed: int = 0

    def validate(self) -> None:
        if not self.token_ratios or not self.piece_ratios:
            raise ConfigError("ratio grids must be non-empty")
        for r in tuple(self.token_ratios) + tuple(self.piece_ratios):
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"pruning ratio must be in [0, 1), got {r}")
        if self.rule not in RULES:
            raise ConfigError(f"unknown selection rule {self.rule!r}; expected one of {RULES}")


@dataclass
class CellResult:
    token_ratio: float
    piece_ratio: float
    selection: MaskSelection
    dev_acc: float
    kept_params: int
    best_epoch: int
    retrain: TuneResult
    token_report: ImportanceReport | None = None
    piece_report: ImportanceReport | None = None


@dataclass
class PruneResult:
    best: CellResult
    cells: list[CellResult] = field(default_factory=list)


def hierarchical_prune(bank: PromptBank, bb: FrozenBackbone, train, dev,
                       sched: PruneSchedule, retrain_epochs: int,
                       opt_kind: str = "adafactor", learning_rate: float = 0.05,
                       weight_decay: float = 1e-5, batch_size: int = 16,
                       seed: int = 0, agg: str = "per_batch_abs") -> PruneResult:
    """Grid search over (token ratio, piece ratio) cells.

    Each cell starts from the snapshot with all-ones masks, prunes tokens by
    importance, rescored pieces by importance, rewinds, and retrains. The
    returned best cell maximizes dev accuracy; ties prefer fewer kept
    parameters, then lexicographically smaller ratios. The bank is left in
    the best cell's retrained state.
    """
    sched.validate()
    if bank.snapshot is None:
        raise StateError("hierarchical pruning requires a snapshotted bank")
    if retrain_epochs < 0:
        raise ConfigError(f"retrain_epochs must be >= 0, got {retrain_epochs}")

    piece_width = bank.e // bank.k
    cells: list[CellResult] = []
    best: CellResult | None = None
    best_state: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    for t_ratio in sched.token_ratios:
        for p_ratio in sched.piece_ratios:
            bank.restore_snapshot()
            bank.reset_masks()

            token_report = score_tokens(bank, bb, train, agg, batch_size)
            token_sel = select_tokens(token_report, t_ratio, sched.rule, sched.seed)
            apply_selection(bank, token_sel)

            piece_report = score_pieces(bank, bb, train, agg, batch_size)
            selection = select_pieces(piece_report, p_ratio, sched.rule,
                                      sched.seed, base=token_sel)

            opt = make_optimizer(opt_kind, learning_rate, weight_decay)
            rewind(bank, selection, opt)
            retrain = tune(bank, bb, train, dev, retrain_epochs, opt,
                           batch_size=batch_size, seed=seed)

            cell = CellResult(t_ratio, p_ratio, selection, retrain.best_dev_acc,
                              selection.kept_cells() * piece_width,
                              retrain.best_epoch, retrain,
                              token_report=token_report, piece_report=piece_report)
            cells.append(cell)
            log.info("cell (%.2f, %.2f): dev=%.4f kept=%d", t_ratio, p_ratio,
                     cell.dev_acc, cell.kept_params)

            rank = (-cell.dev_acc, cell.kept_params, cell.token_ratio, cell.piece_ratio)
            if best is None or rank < (-best.dev_acc, best.kept_params,
                                       best.token_ratio, best.piece_ratio):
                best = cell
                best_state = (bank.p.copy(), bank.token_mask.copy(),
                              bank.piece_mask.copy())

    bank.p[:], bank.token_mask[:], bank.piece_mask[:] = best_state
    return PruneResult(best, cells)


# --- ablation baselines ---------------------------------------------------------


def baseline_negative_masking(bank: PromptBank, bb: FrozenBackbone, train, dev,
                              ratio: float, rule: str = "lowest_score",
                              agg: str = "per_batch_abs", batch_size: int = SCORE_BATCH,
                              seed: int = 0) -> float:
    """Post-hoc token masking: no rewind, no retraining, bank untouched.

    rule="lowest_score" masks the suspected negative tokens; rule="random"
    is the random-masking control at the same ratio.
    """
    probe = bank.copy()
    report = score_tokens(probe, bb, train, agg, batch_size)
    selection = select_tokens(report, ratio, rule, seed)
    apply_selection(probe, selection)
    return evaluate(probe, bb, dev)


def baseline_length_prompt(m_kept: int, bank: PromptBank, bb: FrozenBackbone,
                           train, dev, strat: InitStrategy, epochs: int,
                           opt_kind: str = "adafactor", learning_rate: float = 0.05,
                           weight_decay: float = 1e-5, batch_size: int = 16,
                           seed: int = 0) -> float:
    """Fresh prompt of the surviving length, tuned from scratch.

    Tests excision against masking: the reserved prompt has m_kept rows and
    no dead structures, trained with the stage-1 recipe.
    """
    if not 1 <= m_kept <= bank.m:
        raise ConfigError(f"m_kept must be in [1, {bank.m}], got {m_kept}")
    short = init_prompt(m_kept, bank.e, bank.k, strat, bb)
    opt = make_optimizer(opt_kind, learning_rate, weight_decay)
    result = tune(short, bb, train, dev, epochs, opt, batch_size=batch_size, seed=seed)
    return result.best_dev_acc


# --- export ---------------------------------------------------------------------


def report_to_text(report: ImportanceReport) -> str:
    """One line per token: index, token score, then the k piece scores."""
    lines = [f"batches_seen\t{report.batches_seen}",
             f"aggregation\t{report.aggregation}"]
    for i, (ts, row) in enumerate(zip(report.token_scores, report.piece_scores)):
        cells = "\t".join(repr(float(v)) for v in row)
        lines.append(f"{i}\t{float(ts)!r}\t{cells}")
    return "\n".join(lines) + "\n"
