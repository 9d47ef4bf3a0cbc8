"""Greedy CTC, greedy attention and joint CTC/attention beam decoding."""
from __future__ import annotations

import numpy as np
import torch

from ..errors import ConfigError
from .model import BLANK, Recognizer, decode_ids


def collapse_ctc(frame_ids) -> list[int]:
    """Merge repeats, then drop blanks: [a, a, 0, b, b] -> [a, b]."""
    out, prev = [], None
    for i in frame_ids:
        i = int(i)
        if i != prev and i != BLANK:
            out.append(i)
        prev = i
    return out


def _encode_one(model: Recognizer, features):
    feats, lengths = model.pad_features([features])
    _, bnf, enc_len = model.encode(feats, lengths)
    return bnf, enc_len


def ctc_greedy(model: Recognizer, features) -> list[str]:
    with torch.no_grad():
        bnf, enc_len = _encode_one(model, features)
        ids = model.ctc_head(bnf)[0, : enc_len[0]].argmax(-1).tolist()
    return decode_ids(collapse_ctc(ids))


def attention_greedy(model: Recognizer, features, max_len: int | None = None) -> list[str]:
    eos = model.config.sos_eos
    with torch.no_grad():
        bnf, enc_len = _encode_one(model, features)
        max_len = int(enc_len[0]) if max_len is None else max_len
        tokens = [eos]
        for _ in range(max_len):
            logits = model.decoder_logits(torch.tensor([tokens]), bnf, enc_len)[0, -1]
            nxt = int(logits[1:].argmax()) + 1  # never emit blank
            if nxt == eos:
                break
            tokens.append(nxt)
    return decode_ids(tokens[1:])


class CTCPrefixScorer:
    """Log-probability that the CTC output starts with (or, at <eos>, equals) a prefix."""

    def __init__(self, log_probs: np.ndarray, blank: int = BLANK):
        self.x = log_probs  # (T, C)
        self.blank = blank
        self.T = log_probs.shape[0]

    def initial_state(self):
        r_n = np.full(self.T, -np.inf)
        r_b = np.cumsum(self.x[:, self.blank])
        return r_n, r_b

    def extend(self, prefix: list[int], state, c: int):
        """Return (prefix score of prefix + [c], new state)."""
        r_n_prev, r_b_prev = state
        x = self.x
        r_n = np.full(self.T, -np.inf)
        r_b = np.full(self.T, -np.inf)
        if not prefix:
            r_n[0] = x[0, c]
        psi = r_n[0]
        last = prefix[-1] if prefix else None
        for t in range(1, self.T):
            phi = r_b_prev[t - 1] if last == c else np.logaddexp(r_b_prev[t - 1], r_n_prev[t - 1])
            r_n[t] = np.logaddexp(r_n[t - 1], phi) + x[t, c]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + x[t, self.blank]
            psi = np.logaddexp(psi, phi + x[t, c])
        return psi, (r_n, r_b)

    def final(self, state) -> float:
        r_n, r_b = state
        return float(np.logaddexp(r_n[-1], r_b[-1]))


def joint_beam_search(model: Recognizer, features, beam: int = 4, ctc_weight: float = 0.3, max_len: int | None = None) -> list[str]:
    """Attention beam search rescored with CTC prefix probabilities.

    Hypothesis score = ctc_weight * log p_ctc(prefix) + (1 - ctc_weight) * log p_attn(prefix).
    """
    if beam < 1 or not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError("beam must be >= 1 and ctc_weight in [0, 1]")
    eos = model.config.sos_eos
    with torch.no_grad():
        bnf, enc_len = _encode_one(model, features)
        t_enc = int(enc_len[0])
        max_len = t_enc if max_len is None else max_len
        ctc_lp = model.ctc_head(bnf)[0, :t_enc].log_softmax(-1).double().numpy()
        scorer = CTCPrefixScorer(ctc_lp)
        # (tokens, attn score, ctc prefix score, ctc state)
        hyps = [([], 0.0, 0.0, scorer.initial_state())]
        finished = []
        for _ in range(max_len):
            tokens = torch.tensor([[eos] + h[0] for h in hyps])
            logp = model.decoder_logits(tokens, bnf.expand(len(hyps), -1, -1), enc_len.expand(len(hyps)))[:, -1]
            logp = logp.log_softmax(-1).double().numpy()
            cands = []
            for h, lp in zip(hyps, logp):
                prefix, att, ctc, state = h
                order = np.argsort(-lp[1:])[: beam + 1] + 1
                for c in order:
                    c = int(c)
                    a = att + lp[c]
                    if c == eos:
                        p = scorer.final(state) if ctc_weight > 0 else 0.0
                        cands.append((ctc_weight * p + (1 - ctc_weight) * a, prefix, a, p, None, True))
                    else:
                        if ctc_weight > 0:
                            p, st = scorer.extend(prefix, state, c)
                        else:
                            p, st = 0.0, state
                        cands.append((ctc_weight * p + (1 - ctc_weight) * a, prefix + [c], a, p, st, False))
            cands.sort(key=lambda z: -z[0])
            hyps = []
            for score, prefix, a, p, st, done in cands[:beam]:
                if done:
                    finished.append((score, prefix))
                else:
                    hyps.append((prefix, a, p, st))
            if not hyps:
                break
            if finished and max(f[0] for f in finished) >= hyps[0][1] * (1 - ctc_weight) + ctc_weight * hyps[0][2]:
                break
        if not finished:
            finished = [(ctc_weight * h[2] + (1 - ctc_weight) * h[1], h[0]) for h in hyps]
        best = max(finished, key=lambda f: f[0])[1]
    return decode_ids(best)


def decode(model: Recognizer, features, mode: str = "greedy", beam: int = 4, ctc_weight: float = 0.3) -> list[str]:
    """``greedy``: CTC best path; ``attention``: greedy attention; ``beam``: joint beam search."""
    was_training = model.training
    model.eval()
    try:
        if mode == "greedy":
            return ctc_greedy(model, features)
        if mode == "attention":
            return attention_greedy(model, features)
        if mode == "beam":
            return joint_beam_search(model, features, beam=beam, ctc_weight=ctc_weight)
        raise ConfigError(f"unknown decode mode {mode!r}")
    finally:
        model.train(was_training)
