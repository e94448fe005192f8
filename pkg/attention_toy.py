"""
Permutation-invariant self-attention encoder used to produce per-cell
attention maps over expressed genes.

A cell is a set of (gene, level) tokens: each token embeds as
level * E[gene], there is no positional encoding and no causal mask, so
reordering a cell's entries only permutes the rows and columns of its map.
Weights are seeded-random or loaded from a manifest + float32 blob; the
encoder is never trained here.
"""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import logging
import math
import os

import numpy as np
import torch
from torch import nn

from errors import ConfigMismatchError, WeightFileError
from models import AttentionMap, CellVector, ModelConfig

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BLOB_SUFFIX = ".f32"
HEADS_KEY = "# heads"


class EncoderBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.query = nn.Linear(d, d, dtype=DTYPE)
        self.key = nn.Linear(d, d, dtype=DTYPE)
        self.value = nn.Linear(d, d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff_in = nn.Linear(d, config.d_ff, dtype=DTYPE)
        self.ff_out = nn.Linear(config.d_ff, d, dtype=DTYPE)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, m, _ = x.shape
        return x.view(b, m, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, h: torch.Tensor, padding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b, m, d = h.shape
        x = self.norm1(h)
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(padding[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        h = h + self.out((attn @ v).transpose(1, 2).reshape(b, m, d))
        h = h + self.ff_out(torch.relu(self.ff_in(self.norm2(h))))
        return h, attn


class AttentionEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.n_genes, config.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.n_layers))

    @classmethod
    def seeded(cls, config: ModelConfig) -> "AttentionEncoder":
        """Gaussian weights with std 1/sqrt(d_model), zero biases, identity LayerNorms."""
        model = cls(config)
        generator = torch.Generator().manual_seed(config.seed)
        std = 1.0 / math.sqrt(config.d_model)
        with torch.no_grad():
            for name, param in model.named_parameters():
                if ".norm" in name:
                    param.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    param.copy_(torch.randn(param.shape, generator=generator, dtype=DTYPE) * std)
        return model.eval()

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "AttentionEncoder":
        model = cls(config)
        expected = model.state_dict()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise WeightFileError(f"missing tensors: {', '.join(missing[:3])}")
        for name, tensor in expected.items():
            if tuple(arrays[name].shape) != tuple(tensor.shape):
                raise WeightFileError(f"{name} has shape {arrays[name].shape}, expected {tuple(tensor.shape)}")
        model.load_state_dict({name: torch.as_tensor(np.asarray(arrays[name]), dtype=DTYPE) for name in expected})
        return model.eval()

    @torch.no_grad()
    def forward(self, genes: torch.Tensor, levels: torch.Tensor, padding: torch.Tensor) -> torch.Tensor:
        """(b, m) tokens -> (b, m, m) attention averaged over layers and heads."""
        h = self.embedding(genes) * levels.unsqueeze(-1)
        total = torch.zeros(genes.shape[0], genes.shape[1], genes.shape[1], dtype=DTYPE)
        for block in self.blocks:
            h, attn = block(h, padding)
            total += attn.sum(dim=1)
        return total / (self.config.n_layers * self.config.n_heads)


def build_model(config: ModelConfig, weights_path: Optional[str] = None) -> AttentionEncoder:
    if weights_path:
        model = load_weights(weights_path)
        if model.config.n_genes != config.n_genes:
            raise ConfigMismatchError(f"weights cover {model.config.n_genes} genes, dataset has {config.n_genes}")
        return model
    logger.info(
        f"Seeded encoder: d_model={config.d_model} layers={config.n_layers} "
        f"heads={config.n_heads} d_ff={config.d_ff}"
    )
    return AttentionEncoder.seeded(config)


def _entries(cell: CellVector, model: AttentionEncoder, order: Optional[Sequence[int]]):
    if cell.indices[-1] >= model.config.n_genes:
        raise ConfigMismatchError(f"cell {cell.cell_id} indexes genes beyond V={model.config.n_genes}")
    if order is None:
        return cell.indices, cell.levels
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(cell.nnz)):
        raise ValueError(f"order must be a permutation of 0..{cell.nnz - 1}")
    return cell.indices[order], cell.levels[order]


def embed_cell(cell: CellVector, model: AttentionEncoder) -> torch.Tensor:
    """(m, d_model) token embeddings, level_p * E[gene_p]."""
    genes, levels = _entries(cell, model, None)
    with torch.no_grad():
        return model.embedding(torch.as_tensor(genes)) * torch.as_tensor(levels).unsqueeze(-1)


def _run_padded(model: AttentionEncoder, entries: List[Tuple[np.ndarray, np.ndarray]]) -> List[np.ndarray]:
    width = max(genes.size for genes, _ in entries)
    genes = torch.zeros(len(entries), width, dtype=torch.int64)
    levels = torch.zeros(len(entries), width, dtype=DTYPE)
    padding = torch.ones(len(entries), width, dtype=torch.bool)
    for row, (g, v) in enumerate(entries):
        genes[row, :g.size] = torch.as_tensor(g)
        levels[row, :g.size] = torch.as_tensor(v)
        padding[row, :g.size] = False
    maps = model(genes, levels, padding).numpy()
    return [maps[row, :g.size, :g.size] for row, (g, _) in enumerate(entries)]


def forward_attention(
    cell: CellVector, model: AttentionEncoder, order: Optional[Sequence[int]] = None
) -> AttentionMap:
    """Averaged attention map of one cell; `order` feeds its entries in that order."""
    genes, levels = _entries(cell, model, order)
    (values,) = _run_padded(model, [(genes, levels)])
    return AttentionMap(gene_indices=genes, values=values)


def iter_attention(
    cells: Sequence[CellVector], model: AttentionEncoder, batch_size: int = 32
) -> Iterator[Tuple[int, AttentionMap]]:
    """(input position, map) pairs; batches group cells of similar size."""
    by_size = sorted(range(len(cells)), key=lambda pos: (cells[pos].nnz, pos))
    for start in range(0, len(by_size), batch_size):
        chunk = by_size[start:start + batch_size]
        entries = [_entries(cells[pos], model, None) for pos in chunk]
        for pos, (genes, _), values in zip(chunk, entries, _run_padded(model, entries)):
            yield pos, AttentionMap(gene_indices=genes, values=values)


def forward_batch(cells: Sequence[CellVector], model: AttentionEncoder, batch_size: int = 32) -> List[AttentionMap]:
    """Padded batched forward; results are returned in input order."""
    maps: List[Optional[AttentionMap]] = [None] * len(cells)
    for pos, attention in iter_attention(cells, model, batch_size):
        maps[pos] = attention
    return maps


def blob_path(manifest_path: str) -> str:
    return os.path.splitext(manifest_path)[0] + BLOB_SUFFIX


def save_weights(model: AttentionEncoder, manifest_path: str):
    """Text manifest (`name dim...` per tensor) plus little-endian float32 blob in manifest order."""
    state = model.state_dict()
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(f"{HEADS_KEY} {model.config.n_heads}\n")
        for name, tensor in state.items():
            f.write(" ".join([name, *(str(dim) for dim in tensor.shape)]) + "\n")
    with open(blob_path(manifest_path), "wb") as f:
        for tensor in state.values():
            f.write(tensor.numpy().astype("<f4").tobytes())
    logger.info(f"Weights saved to {manifest_path} (+{BLOB_SUFFIX})")


def _read_manifest(manifest_path: str) -> Tuple[int, List[Tuple[str, Tuple[int, ...]]]]:
    n_heads, shapes = None, []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith(HEADS_KEY):
                n_heads = int(line[len(HEADS_KEY):])
                continue
            name, *dims = line.split()
            try:
                shapes.append((name, tuple(int(dim) for dim in dims)))
            except ValueError:
                raise WeightFileError(f"{manifest_path} line {line_no}: bad shape {dims}") from None
    if n_heads is None:
        raise WeightFileError(f"{manifest_path} does not declare `{HEADS_KEY} H`")
    return n_heads, shapes


def load_weights(manifest_path: str) -> AttentionEncoder:
    n_heads, shapes = _read_manifest(manifest_path)
    shape_of = dict(shapes)
    try:
        n_genes, d_model = shape_of["embedding.weight"]
        d_ff = shape_of["blocks.0.ff_in.weight"][0]
    except (KeyError, ValueError):
        raise WeightFileError(f"{manifest_path} lacks the embedding or first block") from None
    n_layers = len({name.split(".")[1] for name in shape_of if name.startswith("blocks.")})
    config = ModelConfig(n_genes=n_genes, d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=d_ff)

    blob = np.fromfile(blob_path(manifest_path), dtype="<f4")
    expected = sum(int(np.prod(shape)) for _, shape in shapes)
    if blob.size != expected:
        raise WeightFileError(f"blob holds {blob.size} floats, manifest declares {expected}")
    arrays, offset = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        arrays[name] = blob[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    logger.info(f"Loaded encoder weights from {manifest_path}: V={n_genes} d_model={d_model} layers={n_layers}")
    return AttentionEncoder.from_arrays(config, arrays)
