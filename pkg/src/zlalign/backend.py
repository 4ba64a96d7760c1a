"""Model-backend contract and the deterministic toy vision-language model.

Every other module talks to a backend only through the methods listed on
:class:`Backend`.  Two implementations ship here: :class:`ToyBackend`, a
small causal transformer with a patch-based vision encoder, and
:class:`LinearRecoverableBackend`, a synthetic stand-in whose text hidden
states are a known linear function of the image features (used to check
that mapper training can recover a planted relationship).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    InvalidInputError,
    ShapeError,
    VocabRangeError,
)

DTYPE = torch.float64

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

PATCH_SIDE = 4
PATCH_FEATURES = 3 * PATCH_SIDE * PATCH_SIDE


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def tensor_checksum(tensors: dict[str, torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of a name-sorted tensor mapping."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def check_features(x: torch.Tensor, width: int | None = None, what: str = "features") -> torch.Tensor:
    if x.ndim != 2:
        raise ShapeError(f"{what}: expected a 2-D matrix, got shape {tuple(x.shape)}")
    if width is not None and x.shape[1] != width:
        raise ShapeError(f"{what}: expected {width} columns, got {x.shape[1]}")
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{what}: contains NaN or Inf")
    return x


@dataclass(frozen=True)
class BackendConfig:
    vision_patch_count: int = 16
    vision_dim: int = 32
    text_dim: int = 32
    hidden_dim: int = 32
    vocab_size: int = 64
    trunk_layers: int = 2
    max_seq_len: int = 64
    seed: int = 0
    n_heads: int = 2
    max_image_side: int = 1024

    def __post_init__(self):
        for f in fields(self):
            if f.name == "seed":
                continue
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"BackendConfig.{f.name} must be a positive integer, got {v!r}")
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigError("vocab_size must be >= 4 (pad/bos/eos/unk are reserved)")
        grid = math.isqrt(self.vision_patch_count)
        if grid * grid != self.vision_patch_count:
            raise ConfigError("vision_patch_count must be a perfect square (square patch grid)")
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.vision_patch_count >= self.max_seq_len:
            raise ConfigError("max_seq_len must exceed vision_patch_count")

    @property
    def patch_grid(self) -> int:
        return math.isqrt(self.vision_patch_count)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


class WordTokenizer:
    """Lowercase whitespace tokenizer over a fixed word vocabulary."""

    def __init__(self, vocab: dict[str, int]):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if vocab.get(tok) != i:
                raise ConfigError(f"vocabulary must reserve id {i} for {tok}")
        ids = sorted(vocab.values())
        if ids != list(range(len(ids))):
            raise ConfigError("vocabulary ids must be contiguous from 0")
        self.vocab = dict(vocab)
        self.inverse = {i: w for w, i in vocab.items()}

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(w, UNK) for w in text.lower().split()]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            words.append(self.inverse.get(i, SPECIAL_TOKENS[UNK]))
        return " ".join(words)


class Backend(Protocol):
    """What the mapper, training and harness modules need from a model."""

    config: BackendConfig
    trunk_input_dim: int

    def vision_encode(self, image) -> torch.Tensor: ...
    def embed_text(self, tokens: Sequence[int]) -> torch.Tensor: ...
    def trunk_forward(self, inputs: torch.Tensor) -> torch.Tensor: ...
    def tokenize(self, text: str) -> list[int]: ...
    def detokenize(self, ids: Sequence[int]) -> str: ...
    def generate_batch(self, images, prompt, max_new_tokens) -> list[tuple[list[int], torch.Tensor]]: ...
    def caption_hidden(self, images, prompt, captions) -> list[torch.Tensor]: ...
    def weights_checksum(self) -> str: ...


def _as_image_tensor(image, max_side: int) -> torch.Tensor:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.size == 0:
        raise ShapeError("image is empty")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise ShapeError(f"image must be HxW or HxWxC with C in (1, 3, 4), got {arr.shape}")
    h, w = arr.shape[:2]
    if h > max_side or w > max_side:
        raise ShapeError(f"image side exceeds max_image_side={max_side}: {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    if not np.isfinite(arr).all():
        raise InvalidInputError("image contains non-finite pixel values")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.v = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.o = nn.Linear(dim, dim, bias=False, dtype=DTYPE)

    def forward(self, x):
        b, t, d = x.shape
        hd = d // self.n_heads

        def split(z):
            return z.view(b, t, self.n_heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        mask = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = CausalSelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.fc1 = nn.Linear(dim, 2 * dim, dtype=DTYPE)
        self.fc2 = nn.Linear(2 * dim, dim, dtype=DTYPE)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyVLM(nn.Module):
    def __init__(self, cfg: BackendConfig):
        super().__init__()
        self.patch_proj = nn.Linear(PATCH_FEATURES, cfg.vision_dim, dtype=DTYPE)
        self.vision_pos = nn.Parameter(torch.zeros(cfg.vision_patch_count, cfg.vision_dim, dtype=DTYPE))
        self.connector = nn.Linear(cfg.vision_dim, cfg.text_dim, dtype=DTYPE)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.text_dim, dtype=DTYPE)
        self.in_proj = nn.Linear(cfg.text_dim, cfg.hidden_dim, dtype=DTYPE)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.hidden_dim, dtype=DTYPE))
        self.trunk = nn.ModuleList(Block(cfg.hidden_dim, cfg.n_heads) for _ in range(cfg.trunk_layers))
        self.ln_f = nn.LayerNorm(cfg.hidden_dim, dtype=DTYPE)
        self.lm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size, dtype=DTYPE)
        self._init_weights(cfg.seed)

    @torch.no_grad()
    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            if name.endswith(".bias") and "ln" in name:
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            elif "pos" in name:
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=DTYPE))
            elif name == "tok_emb.weight":
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE))
            else:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        for p in self.parameters():
            p.requires_grad_(False)

    def encode_images(self, pixels: torch.Tensor, grid: int) -> torch.Tensor:
        """pixels: B x 3 x H x W -> B x P x d_v."""
        side = grid * PATCH_SIDE
        pooled = F.adaptive_avg_pool2d(pixels, (side, side))
        b = pooled.shape[0]
        patches = (
            pooled.view(b, 3, grid, PATCH_SIDE, grid, PATCH_SIDE)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b, grid * grid, PATCH_FEATURES)
        )
        return torch.tanh(self.patch_proj(patches) + self.vision_pos)

    def run_trunk(self, x: torch.Tensor) -> torch.Tensor:
        """x: B x T x d_t -> B x T x d_h (causal)."""
        h = self.in_proj(x) + self.pos_emb[: x.shape[1]]
        for block in self.trunk:
            h = block(h)
        return self.ln_f(h)


class ToyBackend:
    """Small deterministic causal vision-language model.

    The sequence fed to the trunk is ``[connector(vision) ∘ embed(prompt) ∘ caption]``;
    vision features are projected to the token-embedding width by a fixed
    connector so both modalities enter the trunk at the same width.
    """

    def __init__(self, config: BackendConfig, vocab: dict[str, int] | None = None):
        if vocab is None:
            vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
            for i in range(len(SPECIAL_TOKENS), config.vocab_size):
                vocab[f"w{i}"] = i
        if len(vocab) != config.vocab_size:
            raise ConfigError(f"vocabulary has {len(vocab)} entries but vocab_size={config.vocab_size}")
        self.config = config
        self.tokenizer = WordTokenizer(vocab)
        self.model = ToyVLM(config)
        self.model.eval()
        self.adapters = None  # owned by zlalign.lora

    @property
    def trunk_input_dim(self) -> int:
        return self.config.text_dim

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    @property
    def vision_dim(self) -> int:
        return self.config.vision_dim

    # ---- text side -------------------------------------------------------
    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def detokenize(self, ids: Sequence[int]) -> str:
        return self.tokenizer.decode(ids)

    def _check_ids(self, tokens: Sequence[int]) -> torch.Tensor:
        ids = torch.as_tensor(list(tokens), dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabRangeError(f"token id out of range [0, {self.config.vocab_size})")
        if ids.numel() > self.config.max_seq_len:
            raise CapacityError(f"sequence length {ids.numel()} > max_seq_len {self.config.max_seq_len}")
        return ids

    def embed_text(self, tokens: Sequence[int]) -> torch.Tensor:
        ids = self._check_ids(tokens)
        return self.model.tok_emb(ids)

    # ---- vision side -----------------------------------------------------
    def _encode_batch(self, images) -> torch.Tensor:
        pixels = [_as_image_tensor(im, self.config.max_image_side) for im in images]
        grid = self.config.patch_grid
        # adaptive pooling needs a common size; encode one by one when sizes differ
        if len({tuple(p.shape) for p in pixels}) == 1:
            return self.model.encode_images(torch.stack(pixels), grid)
        return torch.cat([self.model.encode_images(p[None], grid) for p in pixels])

    def vision_encode(self, image) -> torch.Tensor:
        pixels = _as_image_tensor(image, self.config.max_image_side)[None]
        return self.model.encode_images(pixels, self.config.patch_grid)[0]

    def connect(self, vision_features: torch.Tensor) -> torch.Tensor:
        return self.model.connector(vision_features)

    # ---- trunk -----------------------------------------------------------
    def trunk_forward(self, inputs: torch.Tensor) -> torch.Tensor:
        check_features(inputs, self.trunk_input_dim, "trunk input")
        if inputs.shape[0] > self.config.max_seq_len:
            raise CapacityError(f"{inputs.shape[0]} rows > max_seq_len {self.config.max_seq_len}")
        if inputs.shape[0] == 0:
            return inputs.new_zeros(0, self.config.hidden_dim)
        return self.model.run_trunk(inputs[None])[0]

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.model.lm_head(hidden)

    # ---- generation ------------------------------------------------------
    def _prefix(self, images, prompt: Sequence[int]) -> torch.Tensor:
        vis = self.connect(self._encode_batch(images))
        ids = self._check_ids(prompt)
        if ids.numel():
            emb = self.model.tok_emb(ids)[None].expand(vis.shape[0], -1, -1)
            vis = torch.cat([vis, emb], dim=1)
        return vis

    def _check_budget(self, prompt_len: int, new_tokens: int):
        need = self.config.vision_patch_count + prompt_len + new_tokens
        if need > self.config.max_seq_len:
            raise CapacityError(
                f"patches ({self.config.vision_patch_count}) + prompt ({prompt_len}) + "
                f"max_new_tokens ({new_tokens}) = {need} > max_seq_len {self.config.max_seq_len}"
            )

    @torch.no_grad()
    def generate_batch(self, images, prompt: Sequence[int], max_new_tokens: int):
        """Greedy decoding for several images sharing one prompt.

        Returns ``[(caption_ids, caption_hidden), ...]`` where ``caption_hidden``
        holds the trunk hidden states at the generated positions.
        """
        if max_new_tokens < 1:
            raise InvalidInputError("max_new_tokens must be positive")
        prompt = list(prompt)
        self._check_budget(len(prompt), max_new_tokens)
        if len(images) == 0:
            return []
        seq = self._prefix(images, prompt)
        start = seq.shape[1]
        n = seq.shape[0]
        captions: list[list[int]] = [[] for _ in range(n)]
        done = torch.zeros(n, dtype=torch.bool)
        hidden = None
        banned = torch.tensor([PAD, BOS, UNK])
        for _ in range(max_new_tokens):
            hidden = self.model.run_trunk(seq)
            logits = self.model.lm_head(hidden[:, -1]).clone()
            logits[:, banned] = float("-inf")
            nxt = logits.argmax(dim=-1)
            done = done | (nxt == EOS)
            if done.all():
                break
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            for i in range(n):
                if not done[i]:
                    captions[i].append(int(nxt[i]))
            seq = torch.cat([seq, self.model.tok_emb(nxt)[:, None]], dim=1)
            hidden = None
        if hidden is None:
            hidden = self.model.run_trunk(seq)
        return [(cap, hidden[i, start : start + len(cap)].clone()) for i, cap in enumerate(captions)]

    def generate_caption(self, image, prompt: Sequence[int], max_new_tokens: int):
        return self.generate_batch([image], prompt, max_new_tokens)[0]

    def caption_hidden(self, images, prompt: Sequence[int], captions: Sequence[Sequence[int]]):
        """Teacher-forced trunk states at caption positions; differentiable in adapter params."""
        prompt = list(prompt)
        longest = max((len(c) for c in captions), default=0)
        self._check_budget(len(prompt), max(longest, 1))
        seq = self._prefix(images, prompt)
        start = seq.shape[1]
        pad = torch.full((len(captions), longest), PAD, dtype=torch.long)
        for i, c in enumerate(captions):
            pad[i, : len(c)] = self._check_ids(c)
        if longest:
            seq = torch.cat([seq, self.model.tok_emb(pad)], dim=1)
        hidden = self.model.run_trunk(seq)
        return [hidden[i, start : start + len(c)] for i, c in enumerate(captions)]

    # ---- bookkeeping -----------------------------------------------------
    def base_state(self) -> dict[str, torch.Tensor]:
        return dict(self.model.state_dict())

    def weights_checksum(self) -> str:
        return tensor_checksum(self.base_state())

    def train(self, mode: bool = True):
        self.model.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"config": self.config.to_dict(), "vocab": self.tokenizer.vocab, "state": self.base_state()}
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        sidecar = {"config": self.config.to_dict(), "config_hash": self.config.hash(), "kind": "toy-backend"}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ToyBackend":
        path = Path(path)
        try:
            sidecar = json.loads(Path(str(path) + ".json").read_text())
            payload = torch.load(path, weights_only=True)
        except Exception as exc:  # noqa: BLE001 - any read/parse failure is a bad checkpoint
            raise CheckpointError(f"cannot read backend checkpoint {path}: {exc}") from exc
        cfg = BackendConfig.from_dict(payload["config"])
        if sidecar.get("config_hash") != cfg.hash():
            raise CheckpointError(f"{path}: config hash in sidecar does not match checkpoint")
        backend = cls(cfg, payload["vocab"])
        backend.model.load_state_dict(payload["state"])
        return backend


class LinearRecoverableBackend:
    """Synthetic backend with a planted linear text/vision relationship.

    Item ``k`` is an "image" consisting of a single latent row ``z_k``.  Its
    caption is the single token ``4 + k`` and the text hidden state of that
    caption is ``L z_k + noise`` for a fixed random matrix ``L``.  The
    trunk is the identity, so a mapper that learns ``L``'s left inverse
    drives the alignment loss towards zero.  Generation returns the same
    caption with an independent noise draw, exercising the G-variant path.
    """

    def __init__(self, n_items: int, vision_dim: int = 16, hidden_dim: int = 16, noise: float = 0.01, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.latents = rng.standard_normal((n_items, vision_dim))
        self.lift = rng.standard_normal((hidden_dim, vision_dim)) / math.sqrt(vision_dim)
        clean = self.latents @ self.lift.T
        self._gt_table = torch.from_numpy(clean + noise * rng.standard_normal(clean.shape))
        self._gen_table = torch.from_numpy(clean + noise * rng.standard_normal(clean.shape))
        self.config = BackendConfig(
            vision_patch_count=1,
            vision_dim=vision_dim,
            text_dim=hidden_dim,
            hidden_dim=hidden_dim,
            vocab_size=n_items + len(SPECIAL_TOKENS),
            trunk_layers=1,
            max_seq_len=8,
            seed=seed,
            n_heads=1,
        )
        self.trunk_input_dim = hidden_dim
        self.hidden_dim = hidden_dim
        self.vision_dim = vision_dim
        self.adapters = None

    def images(self) -> list[np.ndarray]:
        return [self.latents[k][None, :].copy() for k in range(len(self.latents))]

    def caption_text(self, k: int) -> str:
        return f"item{k}"

    def tokenize(self, text: str) -> list[int]:
        out = []
        for w in text.lower().split():
            if w.startswith("item") and w[4:].isdigit() and int(w[4:]) < len(self.latents):
                out.append(int(w[4:]) + len(SPECIAL_TOKENS))
            else:
                out.append(UNK)
        return out

    def detokenize(self, ids):
        return " ".join(f"item{i - len(SPECIAL_TOKENS)}" for i in ids if i >= len(SPECIAL_TOKENS))

    def vision_encode(self, image) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (1, self.vision_dim):
            raise ShapeError(f"expected a 1x{self.vision_dim} latent image, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidInputError("image contains non-finite values")
        return torch.from_numpy(arr.copy())

    def embed_text(self, tokens) -> torch.Tensor:
        ids = [int(t) - len(SPECIAL_TOKENS) for t in tokens]
        if any(i < 0 or i >= len(self.latents) for i in ids):
            raise VocabRangeError("token outside the item range")
        return self._gt_table[ids] if ids else self._gt_table[:0]

    def trunk_forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return check_features(inputs, self.trunk_input_dim, "trunk input")

    def _item_of(self, image) -> int:
        row = np.asarray(image, dtype=np.float64).reshape(-1)
        return int(np.argmin(((self.latents - row) ** 2).sum(axis=1)))

    def generate_batch(self, images, prompt, max_new_tokens):
        out = []
        for im in images:
            k = self._item_of(im)
            out.append(([k + len(SPECIAL_TOKENS)], self._gen_table[k : k + 1].clone()))
        return out

    def caption_hidden(self, images, prompt, captions):
        return [self._gen_table[[int(t) - len(SPECIAL_TOKENS) for t in c]] for c in captions]

    def weights_checksum(self) -> str:
        return tensor_checksum({"gt": self._gt_table, "gen": self._gen_table})


def pretrain_captioner(
    backend: ToyBackend,
    records,
    image_loader,
    *,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
    prompt: Sequence[int] = (),
) -> list[float]:
    """Supervised next-token pretraining of every toy weight on captioned records.

    Stands in for the pretrained VLM the alignment stages start from; the
    returned list holds the per-step cross-entropy.  Weights are frozen
    again afterwards.
    """
    pairs = [(i, cap) for i, r in enumerate(records) for cap in r.captions]
    if not pairs:
        raise ConfigError("captioner pretraining needs captioned records")
    images = [image_loader(r) for r in records]
    prompt = list(prompt)
    encoded = [(i, backend.tokenize(cap)[: backend.config.max_seq_len - backend.config.vision_patch_count - len(prompt) - 1]) for i, cap in pairs]
    model = backend.model
    params = [p for p in model.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.01)
    rng = np.random.default_rng([seed, 3])
    losses = []
    model.train()
    try:
        for _ in range(steps):
            idx = rng.choice(len(encoded), size=min(batch_size, len(encoded)), replace=False)
            batch = [encoded[j] for j in idx]
            targets_len = max(len(c) for _, c in batch) + 1
            tgt = torch.full((len(batch), targets_len), -100, dtype=torch.long)
            inp = torch.full((len(batch), targets_len - 1), PAD, dtype=torch.long)
            for row, (_, cap) in enumerate(batch):
                tgt[row, : len(cap)] = torch.tensor(cap, dtype=torch.long)
                tgt[row, len(cap)] = EOS
                if cap:
                    inp[row, : len(cap)] = torch.tensor(cap, dtype=torch.long)
            seq = backend._prefix([images[i] for i, _ in batch], prompt)
            start = seq.shape[1] - 1
            if targets_len > 1:
                seq = torch.cat([seq, model.tok_emb(inp)], dim=1)
            hidden = model.run_trunk(seq)[:, start : start + targets_len]
            logits = model.lm_head(hidden)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    finally:
        model.eval()
        for p in params:
            p.requires_grad_(False)
    return losses
