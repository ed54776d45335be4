"""Command-line entry point: ``dpig <command> --config C --seed S --out DIR ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .core import ConfigError, FactorKind, load_config, pose_to_vector
from .data_io import (DatasetError, CheckpointError, SynthConfig, file_digest, load_arrays,
                      save_embeddings, synth_generate)

log = logging.getLogger("dpig")

OUT_ENV = "DPIG_OUT"
COMMANDS = ("synth", "train-stage1", "train-stage2", "sample", "manipulate", "interpolate",
            "invert", "gen-virtual", "evaluate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kinds(text: str | None) -> list[FactorKind]:
    if not text:
        return []
    try:
        return [FactorKind(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"unknown factor in {text!r}; choose from fg, bg, pose") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpig", description="Disentangled person image generation.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="flat key = value config file")
        sp.add_argument("--seed", required=True, type=int)
        sp.add_argument("--out", default=os.environ.get(OUT_ENV),
                        help=f"output directory (default: ${OUT_ENV})")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = add("synth", "render the synthetic stick-figure dataset")
    sp.add_argument("--n-images", type=int, default=200)
    sp.add_argument("--identities", type=int, default=0)
    sp.add_argument("--occlusion", type=float, default=0.05)

    sp = add("train-stage1", "train the reconstruction network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--iters", type=int)

    sp = add("train-stage2", "train the noise-to-embedding mappers")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--kinds", default="fg,bg,pose")
    sp.add_argument("--iters", type=int)

    sp = add("sample", "sample new images from noise")
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--data", help="dataset whose real poses are used for an extra row")

    sp = add("manipulate", "resample some factors of real images while keeping the rest")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--sample", default="fg")
    sp.add_argument("--fix", default=None, help="defaults to every factor not sampled")
    sp.add_argument("--indices", default="0,1,2")
    sp.add_argument("--n", type=int, default=6)

    sp = add("interpolate", "interpolate one factor between two Gaussian codes")
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--data", required=True, help="dataset supplying the held factors")
    sp.add_argument("--kind", default="fg")
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--index", type=int, default=0)

    sp = add("invert", "inverse interpolation between two real images")
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pair", default="0,1")
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--inv-steps", type=int)

    sp = add("gen-virtual", "synthesize a virtual re-ID dataset")
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--data", required=True, help="dataset supplying the pose pool")
    sp.add_argument("--identities", type=int, default=500)
    sp.add_argument("--per-id", type=int, default=24)

    sp = add("evaluate", "compute the evaluation report")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2")
    sp.add_argument("--max-images", type=int, default=200)
    return p


# --- helpers -------------------------------------------------------------------------

class Run:
    """Shared state for one invocation: config, output dir, provenance."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = argv
        try:
            self.cfg = load_config(args.config)
        except FileNotFoundError:
            raise RuntimeFailure(f"config file not found: {args.config}") from None
        self.cfg = self.cfg.replace(rng_seed=args.seed)
        if not args.out:
            raise UsageError(f"--out is required (or set ${OUT_ENV})")
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.checkpoints = {}
        self.outputs = []
        self.extra = {}

    def stage1(self):
        from .stage1 import load_stage1
        path = _need(self.args.stage1)
        self.checkpoints[str(path)] = file_digest(path)
        return load_stage1(path)

    def stage2(self):
        from .stage2 import load_stage2
        path = _need(self.args.stage2)
        self.checkpoints[str(path)] = file_digest(path)
        return load_stage2(path)

    def data(self):
        root = Path(self.args.data)
        if not (root / "manifest.tsv").exists():
            raise RuntimeFailure(f"missing dataset manifest: {root / 'manifest.tsv'}")
        return load_arrays(root)

    def output(self, path):
        self.outputs.append(str(Path(path).relative_to(self.out)))
        return path

    def write_provenance(self):
        record = {
            "command": self.args.command,
            "argv": self.argv,
            "seed": self.args.seed,
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "checkpoints": self.checkpoints,
            "outputs": sorted(self.outputs),
            **self.extra,
        }
        (self.out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


class RuntimeFailure(Exception):
    pass


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise RuntimeFailure(f"missing checkpoint file: {path}")
    return path


def _indices(text: str, n: int) -> list[int]:
    try:
        idx = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad index list {text!r}") from None
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise RuntimeFailure(f"index {bad[0]} outside the dataset (size {n})")
    return idx


# --- commands ------------------------------------------------------------------------

def cmd_synth(run: Run):
    a, cfg = run.args, run.cfg
    scfg = SynthConfig(n_images=a.n_images, image_h=cfg.image_h, image_w=cfg.image_w,
                       n_identities=a.identities, occlusion_prob=a.occlusion, seed=a.seed)
    data = synth_generate(scfg, run.out)
    run.output(run.out / "manifest.tsv")
    if len(data):
        k = min(8, len(data))
        run.output(plotting.image_grid([list(data.images[:k]), [m * 2.0 - 1.0 for m in
                                        np.repeat(data.fg_masks[:k, :, :, None], 3, -1)]],
                                       run.out / "preview.png", row_labels=["image", "fg mask"]))


def cmd_train_stage1(run: Run):
    from .stage1 import Stage1Trainer, save_stage1
    cfg, a = run.cfg, run.args
    data = run.data()
    if len(data) == 0:
        raise RuntimeFailure("dataset is empty")
    trainer = Stage1Trainer(data.images, data.poses, cfg)
    iters = cfg.iters_stage1 if a.iters is None else a.iters
    trainer.train(iters, pose_iters=min(iters, cfg.iters_pose) if a.iters is not None else cfg.iters_pose,
                  checkpoint_dir=run.out / "checkpoints")
    opt = {"g": trainer.opt_g.state_dict(), "d": trainer.opt_d.state_dict(), "p": trainer.opt_p.state_dict()}
    run.output(save_stage1(run.out / "stage1.ckpt", trainer.model, trainer.step, opt))
    h = trainer.history
    (run.out / "history.json").write_text(json.dumps(
        {"d_loss": h.d_loss, "g_loss": h.g_loss, "mae": h.mae, "pose_loss": h.pose_loss}))
    run.output(run.out / "history.json")
    fig = plotting.loss_curves({"D1 objective": h.d_loss, "G1 loss": h.g_loss, "L1 (mae)": h.mae,
                                "pose L2": h.pose_loss}, run.out / "losses.png", title="stage I")
    if fig:
        run.output(fig)


def encode_dataset(stage1, data, batch: int = 32) -> dict:
    """Real embeddings of every factor for a dataset (frozen stage I)."""
    import torch
    from .stage1 import images_to_tensor, pose_tensors
    cfg = stage1.cfg
    out = {k: [] for k in FactorKind}
    with torch.no_grad():
        for s in range(0, len(data), batch):
            ps = data.poses[s:s + batch]
            pt = pose_tensors(ps, cfg, stage1.dtype)
            fg, bg = stage1.encode(images_to_tensor(data.images[s:s + batch], stage1.dtype),
                                   pt.masks, pt.grids)
            out[FactorKind.FG].append(fg.numpy())
            out[FactorKind.BG].append(bg.numpy())
            out[FactorKind.POSE].append(stage1.pose_encoder(pt.vectors).numpy())
    return {k: np.concatenate(v).astype(np.float64) for k, v in out.items()}


def cmd_train_stage2(run: Run):
    from .stage2 import Stage2, Stage2Trainer, save_stage2
    import torch
    cfg, a = run.cfg, run.args
    stage1 = run.stage1()
    data = run.data()
    if len(data) == 0:
        raise RuntimeFailure("dataset is empty")
    kinds = _kinds(a.kinds)
    emb = encode_dataset(stage1, data)
    torch.manual_seed(cfg.rng_seed)
    s2 = Stage2(stage1.cfg.replace(**{k: getattr(cfg, k) for k in (
        "clip_value", "n_critic", "map_learning_rate", "lr_decay", "map_average", "batch_stage2",
        "iters_stage2", "iters_stage2_pose", "rng_seed")}))
    series = {}
    for kind in kinds:
        run.output(save_embeddings(run.out / f"embeddings_{kind.value}.bin", kind.value, emb[kind]))
        iters = a.iters if a.iters is not None else (
            cfg.iters_stage2_pose if kind is FactorKind.POSE else cfg.iters_stage2)
        _, hist = Stage2Trainer(emb[kind], kind, s2.cfg, s2).train(iters)
        series[f"{kind.value} W-estimate"] = hist.critic_estimate
    run.output(save_stage2(run.out / "stage2.ckpt", s2))
    fig = plotting.loss_curves(series, run.out / "losses.png", title="stage II")
    if fig:
        run.output(fig)


def cmd_sample(run: Run):
    from .pipeline import FactorSource, generate
    stage1, stage2 = run.stage1(), run.stage2()
    rng = np.random.default_rng(run.args.seed)
    n = run.args.n
    rows, labels, prov = [], [], []
    settings = [("sample all", {})]
    if run.args.data:
        data = run.data()
        if len(data):
            settings.append(("real pose", {"pose_pool": data.poses}))
    for label, opts in settings:
        row = []
        for _ in range(n):
            srcs = {k: FactorSource.sampled(seed=int(rng.integers(2 ** 31))) for k in FactorKind}
            if "pose_pool" in opts:
                pool = opts["pose_pool"]
                srcs[FactorKind.POSE] = FactorSource.fixed(pool[int(rng.integers(len(pool)))])
            img, rec = generate(srcs, stage1, stage2, rng)
            row.append(img)
            prov.append({"row": label, **_brief(rec)})
        rows.append(row)
        labels.append(label)
    _write_images(run, rows, labels, prov)


def _brief(rec: dict) -> dict:
    return {k: {"mode": v["mode"], "hash": v.get("hash")} for k, v in rec.items()}


def _write_images(run: Run, rows, labels, prov, col_labels=None):
    from .data_io import write_image
    img_dir = run.out / "images"
    img_dir.mkdir(exist_ok=True)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            run.output(img_dir / f"r{i:02d}_c{j:02d}.png")
            write_image(img_dir / f"r{i:02d}_c{j:02d}.png", img)
    (run.out / "images.jsonl").write_text("".join(json.dumps(p, sort_keys=True) + "\n" for p in prov))
    run.output(run.out / "images.jsonl")
    run.output(plotting.image_grid(rows, run.out / "grid.png", row_labels=labels, col_labels=col_labels))


def cmd_manipulate(run: Run):
    from .pipeline import FactorSource, generate
    a = run.args
    sample = _kinds(a.sample)
    fix = _kinds(a.fix) if a.fix is not None else [k for k in FactorKind if k not in sample]
    if set(sample) & set(fix) or set(sample) | set(fix) != set(FactorKind):
        raise UsageError("--sample and --fix must split {fg, bg, pose} between them")
    stage1, stage2 = run.stage1(), run.stage2()
    data = run.data()
    rng = np.random.default_rng(a.seed)
    rows, labels, prov = [], [], []
    for idx in _indices(a.indices, len(data)):
        x, p = data.images[idx], data.poses[idx]
        row = [x]
        for j in range(a.n):
            srcs = {k: FactorSource.conditioned(x, p) for k in fix}
            srcs.update({k: FactorSource.sampled(seed=int(rng.integers(2 ** 31))) for k in sample})
            img, rec = generate(srcs, stage1, stage2, rng)
            row.append(img)
            prov.append({"row": idx, "col": j + 1, **_brief(rec)})
        rows.append(row)
        labels.append(f"#{idx}")
    run.extra["sampled"] = [k.value for k in sample]
    run.extra["fixed"] = [k.value for k in fix]
    _write_images(run, rows, labels, prov,
                  col_labels=["input"] + [f"{'+'.join(k.value for k in sample)} {j + 1}" for j in range(a.n)])


def cmd_interpolate(run: Run):
    from .pipeline import FactorSource, interpolate_gaussian
    a = run.args
    kind = _kinds(a.kind)
    if len(kind) != 1:
        raise UsageError("--kind takes exactly one factor")
    kind = kind[0]
    stage1, stage2 = run.stage1(), run.stage2()
    data = run.data()
    (idx,) = _indices(str(a.index), len(data))
    rng = np.random.default_rng(a.seed)
    k = stage1.cfg.embedding_dim(kind)
    z1, z2 = rng.standard_normal(k), rng.standard_normal(k)
    held = {f: FactorSource.conditioned(data.images[idx], data.poses[idx]) for f in FactorKind if f is not kind}
    frames = interpolate_gaussian(z1, z2, a.steps, kind, stage1, stage2, held)
    prov = [{"t": float(t)} for t in np.linspace(0, 1, a.steps)]
    run.extra["z1"], run.extra["z2"] = z1.tolist(), z2.tolist()
    _write_images(run, [frames], [f"{kind.value} interp"], prov)


def cmd_invert(run: Run):
    from .pipeline import inverse_interpolate
    a = run.args
    stage1, stage2 = run.stage1(), run.stage2()
    data = run.data()
    i, j = _indices(a.pair, len(data))
    frames = inverse_interpolate(data.images[i], data.poses[i], data.images[j], data.poses[j],
                                 a.steps, stage1, stage2, inv_steps=a.inv_steps)
    rows = [[data.images[i]] + frames + [data.images[j]]]
    prov = [{"t": float(t)} for t in np.linspace(0, 1, a.steps)]
    _write_images(run, rows, ["inverse interp"], prov)


def cmd_gen_virtual(run: Run):
    from .pipeline import VirtualIdentitySpec, generate_virtual_dataset
    a = run.args
    stage1, stage2 = run.stage1(), run.stage2()
    data = run.data()
    if len(data) == 0:
        raise RuntimeFailure("pose pool dataset is empty")
    spec = VirtualIdentitySpec(a.identities, a.per_id, data.poses, seed=a.seed)
    generate_virtual_dataset(spec, stage1, stage2, run.out)
    for name in ("virtual.tsv", "manifest.tsv", "pose_pool.tsv", "codes.npz"):
        run.output(run.out / name)
    run.outputs.extend(f"images/{i:04d}_{j:02d}.png" for i in range(a.identities) for j in range(a.per_id))


def cmd_evaluate(run: Run):
    from .evaluation import (disentanglement_score, embedding_frechet, mask_ssim, reid_evaluate,
                             ssim, write_report)
    from .geometry import make_pose_mask
    from .pipeline import normalize_feature
    from .stage1 import compose_batch
    from .stage2 import map_noise_batch
    a = run.args
    stage1 = run.stage1()
    stage2 = run.stage2() if a.stage2 else None
    data = run.data()
    if len(data) == 0:
        raise RuntimeFailure("evaluation dataset is empty")
    data = data.subset(range(min(len(data), a.max_images)))
    cfg = stage1.cfg
    emb = encode_dataset(stage1, data)
    recon = compose_batch(emb[FactorKind.FG], emb[FactorKind.BG], data.poses, stage1)
    records = []
    ss = [ssim(r, x) for r, x in zip(recon, data.images)]
    ms = [mask_ssim(r, x, make_pose_mask(p, cfg.image_h, cfg.image_w, cfg.mask_radius_px))
          for r, x, p in zip(recon, data.images, data.poses)]
    records.append({"metric": "recon_ssim", "value": float(np.mean(ss)), "n": len(ss)})
    records.append({"metric": "recon_mask_ssim", "value": float(np.mean(ms)), "n": len(ms)})
    records.append({"metric": "recon_mae", "value": float(np.abs(recon - data.images).mean())})
    rng = np.random.default_rng(a.seed)
    if stage2 is not None:
        for kind in FactorKind:
            k = cfg.embedding_dim(kind)
            if not stage2.has(kind) or len(data) < k + 1:
                continue
            fake = map_noise_batch(rng.standard_normal((max(len(data), 4 * k), k)), kind, stage2)
            records.append({"metric": f"frechet_{kind.value}",
                            "value": embedding_frechet(emb[kind], fake), "n_real": len(data)})
        if data.fg_masks is not None and stage2.has(FactorKind.FG) and stage2.has(FactorKind.BG):
            rep = disentanglement_score(stage1, stage2, data.images, data.poses, data.fg_masks, seed=a.seed)
            records.append({"metric": "disentangle_fg_in_out", "value": rep.fg_in_out})
            records.append({"metric": "disentangle_bg_out_in", "value": rep.bg_out_in})
    ids = data.identities
    if all(i is not None for i in ids) and len(set(ids)) > 1:
        feats = np.stack([normalize_feature(v) for v in emb[FactorKind.FG]])
        first = {}
        for n, ident in enumerate(ids):
            first.setdefault(ident, n)
        q = sorted(first.values())
        g = [n for n in range(len(ids)) if n not in set(q)]
        qi = [n for n in q if ids[n] in {ids[m] for m in g}]
        if qi:
            res = reid_evaluate(feats[qi], [ids[n] for n in qi], feats[g], [ids[n] for n in g])
            records.append({"metric": "reid_rank1", "value": res.rank1, "n_query": len(qi)})
            records.append({"metric": "reid_mAP", "value": res.mAP, "n_query": len(qi)})
    for path in write_report(records, run.out):
        run.output(path)
    k = min(8, len(data))
    run.output(plotting.image_grid([list(data.images[:k]), list(recon[:k])], run.out / "reconstructions.png",
                                   row_labels=["input", "recon"]))
    run.output(plotting.metric_bars({r["metric"]: r["value"] for r in records}, run.out / "metrics.png"))


HANDLERS = {
    "synth": cmd_synth, "train-stage1": cmd_train_stage1, "train-stage2": cmd_train_stage2,
    "sample": cmd_sample, "manipulate": cmd_manipulate, "interpolate": cmd_interpolate,
    "invert": cmd_invert, "gen-virtual": cmd_gen_virtual, "evaluate": cmd_evaluate,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dpig: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        r = Run(args, argv)
        HANDLERS[args.command](r)
        r.write_provenance()
    except (UsageError, ConfigError) as exc:
        print(f"dpig {args.command}: usage error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, DatasetError, CheckpointError, FileNotFoundError, RuntimeError,
            ValueError, OSError) as exc:
        print(f"dpig {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
