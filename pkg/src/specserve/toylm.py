"""Deterministic layered toy language-model pair.

The target model is an order-``n`` table model: the last ``n`` tokens of a
prefix select a frozen pseudorandom logit vector.  Intermediate layer logits
interpolate between a frozen per-context noise vector and the final logits,
so early-exit decisions get more reliable with depth.  The draft model is a
mixture of the target's next-token distribution with a per-context
pseudorandom distribution and the uniform distribution, weighted by the
divergence ``eta``.

Every pseudorandom vector is drawn with NumPy's ``PCG64`` generator seeded by
``SeedSequence([seed, stream, *context])``; contexts shorter than ``n`` are
left-padded with token 0.  Results are therefore a pure function of the
construction parameters.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

# stream identifiers mixed into the seed sequence
_FINAL_STREAM = 0
_NOISE_STREAM = 1
_DRAFT_STREAM = 2


class InvalidArgument(ValueError):
    """Raised for out-of-range layers, empty prefixes and similar misuse."""


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


class LayeredToyLM:
    """Target/draft model pair over a vocabulary of ``vocab_size`` tokens.

    Args:
        vocab_size: number of tokens; the EOS token is ``vocab_size - 1``.
        layers: depth ``L`` of the target model.
        order: context length of the base table.
        seed: seed of the final-logit table.
        noise_seed: seed of the per-context intermediate-layer noise.
        draft_divergence: ``eta`` in ``[0, 1]``; 0 makes the draft agree
            with the target everywhere, 1 makes it uniform.
        logit_scale: standard deviation of the final logits.
        noise_scale: standard deviation of the intermediate-layer noise.
        draft_noise_scale: logit scale of the draft's pseudorandom component.
        eos_bias: additive offset on the EOS logit of every table entry.
        overrides: optional fixed final-logit vectors keyed by context tuple
            (length ``order``), used to pin specific table entries.
    """

    def __init__(
        self,
        vocab_size: int = 64,
        layers: int = 32,
        order: int = 2,
        seed: int = 0,
        noise_seed: int | None = None,
        draft_divergence: float = 0.4,
        logit_scale: float = 3.0,
        noise_scale: float = 0.3,
        draft_noise_scale: float = 8.0,
        eos_bias: float = -1.0,
        overrides: Mapping[tuple[int, ...], Sequence[float]] | None = None,
    ) -> None:
        if vocab_size < 2:
            raise InvalidArgument("vocab_size must be at least 2")
        if layers < 1:
            raise InvalidArgument("layers must be positive")
        if order < 1:
            raise InvalidArgument("order must be positive")
        if not 0.0 <= draft_divergence <= 1.0:
            raise InvalidArgument("draft_divergence must lie in [0, 1]")
        self.vocab_size = vocab_size
        self.layers = layers
        self.order = order
        self.seed = seed
        self.noise_seed = seed + 1 if noise_seed is None else noise_seed
        self.draft_divergence = float(draft_divergence)
        self.logit_scale = float(logit_scale)
        self.noise_scale = float(noise_scale)
        self.draft_noise_scale = float(draft_noise_scale)
        self.eos_bias = float(eos_bias)
        self._overrides: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, values in (overrides or {}).items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != order:
                raise InvalidArgument(f"override context {ctx} must have length {order}")
            vec = np.asarray(values, dtype=np.float64)
            if vec.shape != (vocab_size,) or not np.all(np.isfinite(vec)):
                raise InvalidArgument(f"override for {ctx} must be {vocab_size} finite values")
            self._overrides[ctx] = vec
        # layer weights ell / L for ell = 1..L; the last entry is exactly 1.0
        self._weights = np.arange(1, layers + 1, dtype=np.float64) / layers
        self._final: dict[tuple[int, ...], np.ndarray] = {}
        self._noise: dict[tuple[int, ...], np.ndarray] = {}
        self._target_tok: dict[tuple[int, ...], int] = {}
        self._draft_tok: dict[tuple[int, ...], int] = {}
        self._ranks: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def eos(self) -> int:
        return self.vocab_size - 1

    # -- table construction -------------------------------------------------

    def context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        if len(prefix) == 0:
            raise InvalidArgument("prefix must be non-empty")
        ctx = tuple(int(t) for t in prefix[-self.order:])
        if len(ctx) < self.order:
            ctx = (0,) * (self.order - len(ctx)) + ctx
        return ctx

    def _draw(self, seed: int, stream: int, ctx: tuple[int, ...], scale: float) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, *ctx])))
        return scale * rng.standard_normal(self.vocab_size)

    def _final_ctx(self, ctx: tuple[int, ...]) -> np.ndarray:
        z = self._final.get(ctx)
        if z is None:
            if ctx in self._overrides:
                z = self._overrides[ctx].copy()
            else:
                z = self._draw(self.seed, _FINAL_STREAM, ctx, self.logit_scale)
                z[self.eos] += self.eos_bias
            z.setflags(write=False)
            self._final[ctx] = z
        return z

    def _noise_ctx(self, ctx: tuple[int, ...]) -> np.ndarray:
        z = self._noise.get(ctx)
        if z is None:
            z = self._draw(self.noise_seed, _NOISE_STREAM, ctx, self.noise_scale)
            z.setflags(write=False)
            self._noise[ctx] = z
        return z

    # -- target side --------------------------------------------------------

    def final_logits(self, prefix: Sequence[int]) -> np.ndarray:
        return self._final_ctx(self.context(prefix))

    def target_logits(self, prefix: Sequence[int], layer: int) -> np.ndarray:
        """Logits of the target model after ``layer`` layers (1-based)."""
        if not 1 <= layer <= self.layers:
            raise InvalidArgument(f"layer {layer} outside [1, {self.layers}]")
        ctx = self.context(prefix)
        w = self._weights[layer - 1]
        return w * self._final_ctx(ctx) + (1.0 - w) * self._noise_ctx(ctx)

    def target_next(self, prefix: Sequence[int]) -> int:
        ctx = self.context(prefix)
        tok = self._target_tok.get(ctx)
        if tok is None:
            tok = int(np.argmax(self._final_ctx(ctx)))
            self._target_tok[ctx] = tok
        return tok

    def layer_ranks(self, prefix: Sequence[int]) -> np.ndarray:
        """``ranks[l - 1, t]`` = number of tokens whose layer-``l`` logit
        strictly exceeds token ``t``'s."""
        ctx = self.context(prefix)
        ranks = self._ranks.get(ctx)
        if ranks is None:
            f = self._final_ctx(ctx)
            n = self._noise_ctx(ctx)
            w = self._weights[:, None]
            z = w * f[None, :] + (1.0 - w) * n[None, :]
            ranks = (z[:, None, :] > z[:, :, None]).sum(axis=2).astype(np.int16)
            ranks.setflags(write=False)
            self._ranks[ctx] = ranks
        return ranks

    # -- draft side ---------------------------------------------------------

    def draft_distribution(self, prefix: Sequence[int]) -> np.ndarray:
        """Draft next-token distribution.

        ``(1 - eta) * p + eta * (1 - eta) * q + eta**2 * u`` where ``p`` is the
        target softmax, ``q`` a per-context pseudorandom distribution and ``u``
        the uniform distribution.
        """
        ctx = self.context(prefix)
        eta = self.draft_divergence
        p = _softmax(self._final_ctx(ctx))
        out = (1.0 - eta) * p
        if eta > 0.0:
            if eta < 1.0:
                q = _softmax(self._draw(self.seed, _DRAFT_STREAM, ctx, self.draft_noise_scale))
                out = out + eta * (1.0 - eta) * q
            out = out + eta * eta * np.full(self.vocab_size, 1.0 / self.vocab_size)
        return out

    def draft_next(self, prefix: Sequence[int]) -> int:
        ctx = self.context(prefix)
        tok = self._draft_tok.get(ctx)
        if tok is None:
            tok = int(np.argmax(self.draft_distribution(ctx)))
            self._draft_tok[ctx] = tok
        return tok

    # -- oracle -------------------------------------------------------------

    def autoregressive_decode(self, prompt: Sequence[int], max_out: int) -> list[int]:
        """Greedy target-only decoding; the reference every serving run must match."""
        if len(prompt) == 0:
            raise InvalidArgument("prompt must be non-empty")
        if max_out < 0:
            raise InvalidArgument("max_out must be non-negative")
        seq = list(prompt)
        out: list[int] = []
        while len(out) < max_out:
            tok = self.target_next(seq)
            out.append(tok)
            seq.append(tok)
            if tok == self.eos:
                break
        return out
