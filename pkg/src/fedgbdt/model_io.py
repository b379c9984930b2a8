"""Canonical text codecs for tree ensembles and aggregated ensembles.

The documents are JSON with a fixed key order and every float written with
17 significant digits, so encoding the same model twice yields identical
bytes and decoding is lossless.
"""

from __future__ import annotations

import json
import math

from .data import TaskKind
from .gbdt import GbdtConfig, Leaf, Split, Tree, TreeEnsemble, TreeNode

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a model document cannot be decoded."""


def _num(value: float) -> str:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError("model values must be finite")
    text = format(value, ".17g")
    # keep floats recognisable as floats on re-read
    if all(c in "-0123456789" for c in text):
        text += ".0"
    return text


def _node_text(node: TreeNode) -> str:
    if isinstance(node, Leaf):
        return '{"weight":%s}' % _num(node.weight)
    return '{"feature":%d,"threshold":%s,"left":%s,"right":%s}' % (
        node.feature, _num(node.threshold), _node_text(node.left), _node_text(node.right))


def _config_text(cfg: GbdtConfig) -> str:
    return ('{"num_trees":%d,"max_depth":%d,"eta":%s,"lambda":%s,"gamma":%s,'
            '"min_child_weight":%s,"base_score":%s}') % (
        cfg.num_trees, cfg.max_depth, _num(cfg.eta), _num(cfg.reg_lambda), _num(cfg.gamma),
        _num(cfg.min_child_weight), _num(cfg.base_score))


def _ensemble_text(ensemble: TreeEnsemble) -> str:
    trees = ",\n".join(_node_text(t.root) for t in ensemble.trees)
    return '{"format_version":%d,"task":"%s","config":%s,"trees":[\n%s\n]}' % (
        FORMAT_VERSION, ensemble.task.value, _config_text(ensemble.config), trees)


def serialize_ensemble(ensemble: TreeEnsemble) -> bytes:
    return (_ensemble_text(ensemble) + "\n").encode("utf-8")


# ---------------------------------------------------------------- decoding


def _require(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ModelFormatError(f"{where}: field {key!r} must be a number")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ModelFormatError(f"{where}: field {key!r} must be an integer")
        return value
    if not isinstance(value, kind):
        raise ModelFormatError(f"{where}: field {key!r} has the wrong type")
    return value


def _decode_node(obj, where: str) -> TreeNode:
    if not isinstance(obj, dict):
        raise ModelFormatError(f"{where}: node must be an object")
    if "weight" in obj:
        if set(obj) != {"weight"}:
            raise ModelFormatError(f"{where}: leaf has unexpected fields")
        return Leaf(_require(obj, "weight", float, where))
    if set(obj) != {"feature", "threshold", "left", "right"}:
        raise ModelFormatError(f"{where}: internal node needs feature/threshold/left/right")
    feature = _require(obj, "feature", int, where)
    if feature < 1:
        raise ModelFormatError(f"{where}: feature index must be >= 1")
    return Split(feature, _require(obj, "threshold", float, where),
                 _decode_node(obj["left"], where), _decode_node(obj["right"], where))


def _decode_ensemble(obj, where: str = "ensemble") -> TreeEnsemble:
    version = _require(obj, "format_version", int, where)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{where}: unsupported format_version {version}")
    try:
        task = TaskKind.parse(_require(obj, "task", str, where))
    except ValueError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None
    c = _require(obj, "config", dict, where)
    try:
        config = GbdtConfig(
            num_trees=_require(c, "num_trees", int, where),
            max_depth=_require(c, "max_depth", int, where),
            eta=_require(c, "eta", float, where),
            reg_lambda=_require(c, "lambda", float, where),
            gamma=_require(c, "gamma", float, where),
            min_child_weight=_require(c, "min_child_weight", float, where),
            base_score=_require(c, "base_score", float, where),
        )
        trees = _require(obj, "trees", list, where)
        return TreeEnsemble(
            tuple(Tree(_decode_node(t, f"{where} tree {i}")) for i, t in enumerate(trees)),
            config, task)
    except ModelFormatError:
        raise
    except (ValueError, RecursionError) as exc:
        raise ModelFormatError(f"{where}: {exc}") from None


def _load_json(data: "bytes | str"):
    try:
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise ModelFormatError(f"not a valid model document: {exc}") from None


def deserialize_ensemble(data: "bytes | str") -> TreeEnsemble:
    return _decode_ensemble(_load_json(data))


# ---------------------------------------------------------------- aggregates


def serialize_aggregate(agg) -> bytes:
    clients = ",\n".join('{"cid":%d,"ensemble":%s}' % (cid, _ensemble_text(ens))
                         for cid, ens in agg.per_client)
    text = ('{"format_version":%d,"num_clients":%d,"trees_per_client":%d,"task":"%s",'
            '"clients":[\n%s\n]}\n') % (FORMAT_VERSION, agg.num_clients, agg.trees_per_client,
                                        agg.task.value, clients)
    return text.encode("utf-8")


def deserialize_aggregate(data: "bytes | str"):
    from .aggregation import AggregatedEnsemble, aggregate_ensembles

    obj = _load_json(data)
    where = "aggregate"
    version = _require(obj, "format_version", int, where)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{where}: unsupported format_version {version}")
    k = _require(obj, "num_clients", int, where)
    m = _require(obj, "trees_per_client", int, where)
    records = _require(obj, "clients", list, where)
    subs = []
    for rec in records:
        cid = _require(rec, "cid", int, where)
        subs.append((cid, _decode_ensemble(_require(rec, "ensemble", dict, where),
                                           f"client {cid}")))
    try:
        agg: AggregatedEnsemble = aggregate_ensembles(subs)
    except ValueError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None
    if agg.num_clients != k or agg.trees_per_client != m:
        raise ModelFormatError(f"{where}: header disagrees with client records")
    if agg.task.value != _require(obj, "task", str, where):
        raise ModelFormatError(f"{where}: header task disagrees with client records")
    return agg
