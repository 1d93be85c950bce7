"""Finite-difference checks of every training loss on toy shapes."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import align as al
from . import numeric as nm
from . import supervise as sv
from . import textembed as te
from .graph import build_graph
from .train import Batch, TextSupervision, TokenizerModel, TrainConfig, stage1_objective
from .vocab import recon_loss, vq_loss

TOY = {"d": 4, "M": 4, "N": 2, "B": 4, "D_t": 8, "D_w": 8}


@dataclass
class SuiteResult:
    name: str
    report: nm.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        return f"{self.name:<10} {self.report.summary()} [{self.seconds:.2f}s]"


def toy_model(seed: int = 0, text_dim: int = TOY["D_t"]) -> tuple[TokenizerModel, TrainConfig, Batch]:
    rng = np.random.default_rng(seed)
    users, items = 6, 5
    edges = {(int(u), int(i)) for u, i in zip(rng.integers(0, users, 16), rng.integers(0, items, 16))}
    graph = build_graph(sorted(edges), users, items)
    cfg = TrainConfig(slot_dim=TOY["d"], codeword_dim=TOY["M"], micro_count=TOY["N"], k_macro=5, k_micro=6,
                      init_scale=0.5, seed=seed, max_len=8)
    model = TokenizerModel.create(cfg, graph, text_dim)
    b = TOY["B"]
    batch = Batch(np.array([0, 1, 2, 3]), np.array([0, 2, 1, 4]), np.array([1.0, 0.0, 1.0, 1.0])[:b])
    return model, cfg, batch


def _tables(model, batch):
    table = model.table()
    return model.encode_rows(table, batch.users, "user"), model.encode_rows(table, batch.items, "item")


def recon_case(seed=0):
    model, cfg, batch = toy_model(seed)

    def fn():
        u, i = _tables(model, batch)
        return recon_loss(u.q, i.q, batch.labels)
    return fn, model.store


def vq_case(seed=0):
    model, cfg, batch = toy_model(seed)

    def fn():
        u, i = _tables(model, batch)
        total = nm.constant(0.0)
        for enc in (u, i):
            for p, c in zip(enc.projected, enc.codewords):
                total = nm.add(total, vq_loss(p, c, cfg.eta))
        return total
    return fn, model.store


def macro_case(seed=0):
    model, cfg, batch = toy_model(seed)
    cls = np.random.default_rng(seed + 1).standard_normal((TOY["B"], TOY["D_t"]))

    def fn():
        u, i = _tables(model, batch)
        return sv.macro_infonce(sv.fuse_macro(u.macro, i.macro, model.fusion), cls)
    return fn, model.store


def micro_case(seed=0):
    model, cfg, batch = toy_model(seed)
    rng = np.random.default_rng(seed + 2)
    seqs = [rng.standard_normal((n, TOY["D_t"])) for n in (3, 5, 1, 4)]
    masks = sv.sample_masks(seqs, rng, model.mask.max_len)

    def fn():
        u, _ = _tables(model, batch)
        pred = sv.masked_predictions(u.micro, masks, model.attn, model.mask)
        return sv.batch_micro_loss(pred, masks)
    return fn, model.store


def _stage2_fixture(seed=0):
    rng = np.random.default_rng(seed + 3)
    n = TOY["N"] + 1
    provider = te.MockProvider(TOY["D_w"])
    text = "history fantasy facet1 facet4 quite"
    words = te.tokenize_words(text) + al.template_words(al.DEFAULT_TEMPLATE)
    backbone = al.StandInBackbone.create(words, provider, seed)
    projector = al.Projector.create(rng, TOY["M"], TOY["D_w"])
    ex = al.make_example(rng.standard_normal((n, TOY["M"])), rng.standard_normal((n, TOY["M"])), text,
                         backbone, 64, rng)
    return projector, backbone, ex


def sar_case(seed=0):
    projector, backbone, ex = _stage2_fixture(seed)

    def fn():
        _, ctx = al.example_context(ex, projector, backbone)
        return al.sar_loss(ctx)
    return fn, projector.store


def nll_case(seed=0):
    projector, backbone, ex = _stage2_fixture(seed)

    def fn():
        tokens = al.project_tokens(ex.user_codewords, ex.item_codewords, projector)
        prefix = al.build_prefix(backbone, al.DEFAULT_TEMPLATE, tokens, ex.user_codewords.shape[0])
        return al.nll_loss(backbone, prefix, ex.target_ids)
    return fn, projector.store


def stage1_case(seed=0):
    model, cfg, batch = toy_model(seed)
    rng = np.random.default_rng(seed + 4)
    text = TextSupervision(
        {(0, 0): rng.standard_normal(TOY["D_t"]), (2, 1): rng.standard_normal(TOY["D_t"])},
        {0: rng.standard_normal((3, TOY["D_t"])), 3: rng.standard_normal((2, TOY["D_t"]))},
    )

    def fn():
        return stage1_objective(model, batch, cfg, text, np.random.default_rng(seed + 5)).total
    return fn, model.store


def stage2_case(seed=0):
    projector, backbone, ex = _stage2_fixture(seed)

    def fn():
        return al.stage2_objective([ex], projector, backbone, 1.0)[0]
    return fn, projector.store


CASES: dict[str, Callable] = {
    "recon": recon_case,
    "vq": vq_case,
    "macro": macro_case,
    "micro": micro_case,
    "sar": sar_case,
    "nll": nll_case,
    "stage1": stage1_case,
    "stage2": stage2_case,
}


def run_suite(seed: int = 0, tol: float = 1e-4, floor: float = 1e-8, epsilon: float = 1e-5,
              only=None) -> list[SuiteResult]:
    out = []
    for name, case in CASES.items():
        if only is not None and name not in only:
            continue
        start = time.perf_counter()
        fn, store = case(seed)
        report = nm.finite_diff_check(fn, store, epsilon=epsilon, tol=tol, floor=floor,
                                      rng=np.random.default_rng(seed))
        out.append(SuiteResult(name, report, time.perf_counter() - start))
    return out
