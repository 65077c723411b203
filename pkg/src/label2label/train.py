"""Training loop, evaluation, checkpoints and attention export."""

import hashlib
import json
import logging
import math
import os

import numpy as np

from . import tensor as T
from . import tensor_io
from .config import RunConfig, format_kv, from_mapping, parse_kv
from .data import load_dataset, manifest_spec, marginal_majority
from .errors import IncompatibleCheckpoint, ManifestError, NonFiniteLoss, SampleNotFound
from .model import Label2Label, ModelConfig
from .nn import SGD, CosineLR, PlateauLR, clip_grad_norm
from .objectives import WeightScheme, metric_report

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# hashing and run records
# ---------------------------------------------------------------------------


def git_blob_hash(data):
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths):
    """Combined git-style blob hash over files (directories are walked in sorted order)."""
    entries = []
    for root in paths:
        if not root:
            continue
        if os.path.isdir(root):
            for dirpath, dirnames, filenames in os.walk(root):
                dirnames.sort()
                for fn in sorted(filenames):
                    full = os.path.join(dirpath, fn)
                    with open(full, "rb") as fh:
                        entries.append(f"{os.path.relpath(full, root)} {git_blob_hash(fh.read())}")
        elif os.path.exists(root):
            with open(root, "rb") as fh:
                entries.append(f"{os.path.basename(root)} {git_blob_hash(fh.read())}")
    return git_blob_hash("\n".join(entries).encode())


def write_run_record(out_dir, command, args, config=None, inputs=()):
    os.makedirs(out_dir, exist_ok=True)
    rec = {"command": command, "args": args, "config": config, "input_hash": hash_inputs(inputs)}
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(rec, fh, indent=2)
        fh.write("\n")
    return rec


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    """Directory of L2LT parameter files plus a key=value manifest and the model config."""
    os.makedirs(path, exist_ok=True)
    schemes = dict(model.named_schemes())
    lines = []
    for name, t in model.named_parameters():
        fn = name + ".l2lt"
        tensor_io.save(os.path.join(path, fn), t.data)
        shape = "x".join(str(s) for s in t.shape)
        lines.append(f"{name}={fn},{shape},{schemes[name]}\n")
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    cfg = model.config.to_dict()
    cfg["conv_channels"] = ",".join(str(c) for c in cfg["conv_channels"])
    if extra:
        cfg.update(extra)
    with open(os.path.join(path, "model.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_kv(cfg))


def _model_config_from_kv(kv):
    ints = ("n_attributes", "d", "heads", "ffn_hidden", "aqn_layers", "mlm_layers", "in_channels")
    out = {}
    for k, v in kv.items():
        if k in ints:
            out[k] = int(v)
        elif k == "pos_embedding":
            out[k] = v == "True"
        elif k == "conv_channels":
            out[k] = tuple(int(c) for c in v.split(","))
        elif k in ("mask_strategy", "mode"):
            out[k] = v
    return ModelConfig(**out), kv


def load_checkpoint(path):
    """Rebuild a model from a checkpoint directory; returns (model, model.txt mapping)."""
    try:
        with open(os.path.join(path, "model.txt"), encoding="utf-8") as fh:
            kv = parse_kv(fh.read(), "model.txt")
        with open(os.path.join(path, "manifest.txt"), encoding="utf-8") as fh:
            man = parse_kv(fh.read(), "manifest.txt")
    except OSError as exc:
        raise IncompatibleCheckpoint(f"{path}: {exc}") from exc
    cfg, kv = _model_config_from_kv(kv)
    model = Label2Label(cfg, np.random.default_rng(0))
    state = {}
    for name, entry in man.items():
        fn, shape, _scheme = entry.split(",")
        arr = tensor_io.load(os.path.join(path, fn))
        if "x".join(str(s) for s in arr.shape) != shape:
            raise IncompatibleCheckpoint(f"{name}: file shape {arr.shape} disagrees with manifest {shape}")
        state[name] = arr
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    return model, kv


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _weight_scheme(cfg, train_labels):
    if cfg.weighting == "uniform":
        return WeightScheme()
    return WeightScheme("exponential", np.asarray(train_labels, dtype=np.float64).mean(axis=0))


def _evaluate_arrays(model, ds):
    aqn_p, final_p = model.predict_all(ds.images)
    return (aqn_p > 0.5).astype(np.int64), (final_p > 0.5).astype(np.int64)


def _init_from(model, path):
    src, _ = load_checkpoint(path)
    own = dict(model.named_parameters())
    copied = 0
    for name, t in src.named_parameters():
        if name.startswith(("backbone.", "aqn.")):
            if name not in own or own[name].shape != t.shape:
                raise IncompatibleCheckpoint(f"init checkpoint parameter {name} does not fit")
            own[name].data = t.data.copy()
            copied += 1
    if not copied:
        raise IncompatibleCheckpoint("init checkpoint has no backbone/AQN parameters")


def train(cfg, log_fn=None):
    """Train per ``cfg``; writes train_log.jsonl and checkpoint/ (best val) under cfg.out.

    Returns the list of per-epoch log records.
    """
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    train_ds = load_dataset(cfg.dataset, cfg.train_split)
    val_ds = load_dataset(cfg.dataset, cfg.val_split)
    if len(train_ds) == 0:
        raise ManifestError("training split is empty")
    m = train_ds.labels.shape[1]
    model = Label2Label(cfg.model_config(m, train_ds.images.shape[-1]), np.random.default_rng([cfg.seed, 1]))
    if cfg.init_checkpoint:
        _init_from(model, cfg.init_checkpoint)
    params = model.trainable_parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    cosine = CosineLR(cfg.lr, cfg.epochs)
    plateau = PlateauLR(cfg.lr, patience=cfg.patience)
    scheme = _weight_scheme(cfg, train_ds.labels)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    mask_rng = np.random.default_rng([cfg.seed, 3])
    frozen = model.frozen_prefixes()
    records = []
    best = math.inf
    log_path = os.path.join(cfg.out, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(cfg.epochs):
            if cfg.scheduler == "cosine":
                opt.lr = cosine(epoch)
            elif cfg.scheduler == "plateau":
                opt.lr = plateau.lr
            sums = np.zeros(3)
            n_seen = 0
            for idx in train_ds.batches(cfg.batch_size, shuffle_rng):
                x, y = train_ds.images[idx], train_ds.labels[idx]
                if frozen:
                    total, l_aqn, l_mlm = _two_stage_loss(model, x, y, cfg, mask_rng, scheme)
                else:
                    total, l_aqn, l_mlm, _ = model.loss(x, y, cfg.lam, cfg.alpha, mask_rng, scheme)
                if not np.isfinite(total.data).all():
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
                T.backward(total)
                if cfg.grad_clip:
                    clip_grad_norm(params, cfg.grad_clip)
                opt.step()
                k = len(idx)
                sums += k * np.array([l_aqn.item(), l_mlm.item() if l_mlm is not None else 0.0, total.item()])
                n_seen += k
            aqn_pred, final_pred = _evaluate_arrays(model, val_ds)
            rep = metric_report(final_pred, val_ds.labels, val_ds.attribute_names)
            rec = {
                "epoch": epoch,
                "L_aqn": sums[0] / n_seen,
                "L_mlm": sums[1] / n_seen if model.mlm is not None else None,
                "L_total": sums[2] / n_seen,
                "lr": opt.lr,
                "val": rep.to_dict(),
            }
            records.append(rec)
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
            if log_fn:
                log_fn(rec)
            if rep.mean_error < best:
                best = rep.mean_error
                save_checkpoint(model, os.path.join(cfg.out, "checkpoint"), {"best_epoch": epoch})
            if cfg.scheduler == "plateau":
                plateau.step(rep.mean_error)
    return records


def _two_stage_loss(model, x, y, cfg, mask_rng, scheme):
    """IC-MLM loss on detached backbone/AQN outputs."""
    with T.no_grad():
        feats = model.backbone(x)
        aqn_out = model.aqn(feats)
    from .icmlm import mask_sentence
    from .objectives import bce_loss

    words = aqn_out.pseudo_sentence
    if cfg.alpha > 0:
        words, _ = mask_sentence(words, cfg.alpha, mask_rng)
    out = model.mlm(model.mlm.embed(words), feats)
    w = scheme(y)
    l_mlm = bce_loss(out.probs, y, w)
    l_aqn = bce_loss(aqn_out.probs, y, w)
    return l_mlm * float(cfg.lam), l_aqn, l_mlm


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def occluded_error(preds, labels, occluded):
    occ = np.asarray(occluded).astype(bool)
    if not occ.any():
        return None
    return float((np.asarray(preds)[occ] != np.asarray(labels)[occ]).mean())


def evaluate(checkpoint, dataset, split="test", train_split="train"):
    """Metric reports for the model head (and oracle / baselines for synthetic data)."""
    model, kv = load_checkpoint(checkpoint)
    ds = load_dataset(dataset, split)
    if ds.labels.shape[1] != model.config.n_attributes:
        raise IncompatibleCheckpoint(
            f"checkpoint has M={model.config.n_attributes}, dataset has M={ds.labels.shape[1]}")
    aqn_pred, final_pred = _evaluate_arrays(model, ds)
    result = {
        "mode": model.config.mode,
        "split": split,
        "model": metric_report(final_pred, ds.labels, ds.attribute_names).to_dict(),
    }
    if model.mlm is not None:
        result["aqn_head"] = metric_report(aqn_pred, ds.labels, ds.attribute_names).to_dict()
    if ds.spec is not None:
        q = ds.oracle_posterior()
        oracle_pred = (q > 0.5).astype(np.int64)
        result["oracle"] = metric_report(oracle_pred, ds.labels, ds.attribute_names).to_dict()
        tr = load_dataset(dataset, train_split)
        maj = np.broadcast_to(marginal_majority(tr.labels), ds.labels.shape)
        result["marginal_majority"] = metric_report(maj, ds.labels, ds.attribute_names).to_dict()
        if ds.occluded is not None:
            result["occluded_error"] = {
                "model": occluded_error(final_pred, ds.labels, ds.occluded),
                "oracle": occluded_error(oracle_pred, ds.labels, ds.occluded),
                "marginal_majority": occluded_error(maj, ds.labels, ds.occluded),
            }
            if model.mlm is not None:
                result["occluded_error"]["aqn_head"] = occluded_error(aqn_pred, ds.labels, ds.occluded)
    return result


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def write_pgm(path, matrix):
    """8-bit binary PGM, values min-max scaled to [0, 255]."""
    a = np.asarray(matrix, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    img = np.rint(scaled * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _matrix_entries(maps, kind, row_labels, col_labels=None, hw=None):
    out = []
    for layer, attn in enumerate(maps):
        for head in range(attn.shape[0]):
            ent = {"kind": kind, "layer": layer, "head": head, "row_labels": row_labels,
                   "matrix": attn[head].tolist()}
            if col_labels is not None:
                ent["col_labels"] = col_labels
            if hw is not None:
                ent["grid"] = list(hw)
            out.append(ent)
    return out


def attention_for_sample(model, image, names):
    """Self- and cross-attention matrices for one image, labelled by predicted words."""
    with T.no_grad():
        res = model.forward(image[None])
    h, w = res.features.height, res.features.width
    pred = (res.final_probs.data[0] > 0.5).astype(int)
    words = res.aqn.pseudo_sentence[0]
    rows = [f"{n}={int(v)}" for n, v in zip(names, words)]
    entries = []
    if model.aqn.layers:
        entries += _matrix_entries([a[0] for a in model.aqn.cross_attention_maps()], "aqn_cross",
                                   [f"{n}" for n in names], hw=(h, w))
    if model.mlm is not None:
        entries += _matrix_entries([a[0] for a in model.mlm.self_attention_maps()], "mlm_self", rows,
                                   col_labels=rows)
        entries += _matrix_entries([a[0] for a in model.mlm.cross_attention_maps()], "mlm_cross", rows, hw=(h, w))
    return {"pseudo_sentence": words.tolist(), "prediction": pred.tolist(), "attention": entries}


def export_attention(checkpoint, dataset, sample_ids, out_dir):
    model, _ = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    pos = {int(i): k for k, i in enumerate(ds.ids)}
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for sid in sample_ids:
        if int(sid) not in pos:
            raise SampleNotFound(f"sample {sid} not in dataset")
        doc = attention_for_sample(model, ds.images[pos[int(sid)]], ds.attribute_names)
        doc["sample_id"] = int(sid)
        path = os.path.join(out_dir, f"sample_{sid}_attention.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")
        written.append(path)
        for ent in doc["attention"]:
            mat = np.asarray(ent["matrix"])
            if "grid" in ent:
                gh, gw = ent["grid"]
                for r, label in enumerate(ent["row_labels"]):
                    fn = f"sample_{sid}_{ent['kind']}_l{ent['layer']}_h{ent['head']}_{label.replace('=', '_')}.pgm"
                    write_pgm(os.path.join(out_dir, fn), mat[r].reshape(gh, gw))
            else:
                fn = f"sample_{sid}_{ent['kind']}_l{ent['layer']}_h{ent['head']}.pgm"
                write_pgm(os.path.join(out_dir, fn), mat)
    return written


def group_attention_contrast(model, images, attr_map, layer=None):
    """Mean off-diagonal IC-MLM self-attention for same-factor vs cross-factor pairs.

    Averages over samples, heads and (unless ``layer`` is given) all layers.
    """
    attr_map = np.asarray(attr_map)
    same = attr_map[:, None] == attr_map[None, :]
    off = ~np.eye(len(attr_map), dtype=bool)
    with T.no_grad():
        model.forward(images)
    maps = model.mlm.self_attention_maps()
    if layer is not None:
        maps = [maps[layer]]
    mean_map = np.mean([a.mean(axis=(0, 1)) for a in maps], axis=0)  # (M, M)
    cross_mask = ~same & off
    same_mask = same & off
    same_mean = float(mean_map[same_mask].mean()) if same_mask.any() else float("nan")
    cross_mean = float(mean_map[cross_mask].mean()) if cross_mask.any() else float("nan")
    return same_mean, cross_mean


def run_config_from_kv(kv):
    return from_mapping(kv)


__all__ = [
    "RunConfig", "train", "evaluate", "save_checkpoint", "load_checkpoint", "export_attention",
    "hash_inputs", "write_run_record", "manifest_spec",
]
