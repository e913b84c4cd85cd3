"""Independent NumPy forward pass used to freeze golden logits.

Reads a task checkpoint, perturbs every tensor deterministically (so gains
and biases are not trivial), writes the perturbed checkpoint, and records
logits for several per-block plans.

usage: python3 tools/golden_logits.py <init.ckpt> <out_dir>
"""
import json
import sys

import numpy as np

NEG = -1e30


def read_ckpt(path):
    lines = open(path).read().splitlines()
    assert lines[0] == "attendout-checkpoint 1"
    kind = lines[1]
    config = json.loads(lines[2][len("config "):])
    tensors, i = {}, 3
    while lines[i] != "end":
        _, name, r, c = lines[i].split()
        r, c = int(r), int(c)
        rows = [list(map(float, lines[i + 1 + k].split())) for k in range(r)]
        tensors[name] = np.array(rows).reshape(r, c)
        i += 1 + r
    return kind, config, tensors


def write_ckpt(path, kind, config, tensors):
    with open(path, "w") as f:
        f.write("attendout-checkpoint 1\n%s\nconfig %s\n" % (kind, json.dumps(config, separators=(",", ":"))))
        for name, t in tensors.items():
            f.write("tensor %s %d %d\n" % (name, t.shape[0], t.shape[1]))
            for row in t:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")
        f.write("end\n")


def layer_norm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def attention(x, p, heads, plan):
    L, d = x.shape
    dk = d // heads
    v = x @ p["w_v"]
    if plan["kind"] == "all_dropped":
        return np.full((L, L), 1.0 / L) @ v @ p["w_o"]
    q, k = x @ p["w_q"], x @ p["w_k"]
    bits = np.array(plan.get("bits", [0] * L * L), dtype=bool).reshape(L, L)
    out = np.zeros((L, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        if plan["kind"] == "scores":
            full = bits.all(axis=1)
            s = np.where(bits, NEG, s)
            s[full] = 0.0
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        if plan["kind"] == "scores":
            a[bits.all(axis=1)] = 1.0 / L
        if plan["kind"] == "weights":
            a = a * (~bits)
        out[:, sl] = a @ v[:, sl]
    return out @ p["w_o"]


def forward(t, cfg, tokens, plans):
    x = t["tok_emb"][tokens] + t["pos_emb"][: len(tokens)]
    for i, plan in enumerate(plans):
        if plan["kind"] == "skip":
            continue
        b = lambda n: t["block%d.%s" % (i, n)]
        attn = {n: b("attn." + n) for n in ("w_q", "w_k", "w_v", "w_o")}
        h1 = layer_norm(x + attention(x, attn, cfg["num_heads"], plan), b("ln1_gain"), b("ln1_bias"))
        ff = gelu(h1 @ b("ff_w1") + b("ff_b1")) @ b("ff_w2") + b("ff_b2")
        x = layer_norm(h1 + ff, b("ln2_gain"), b("ln2_bias"))
    return (x[0:1] @ t["head_w"] + t["head_b"])[0]


def main():
    src, out = sys.argv[1], sys.argv[2]
    kind, cfg, t = read_ckpt(src)
    rng = np.random.default_rng(20240611)
    for name in t:
        t[name] = t[name] + rng.uniform(-0.3, 0.3, size=t[name].shape)
    write_ckpt(out + "/golden_model.ckpt", kind, cfg, t)

    L = 6
    tokens = [0, 1, 2, 3, 1, 4]
    partial = [int(v) for v in rng.random(L * L) < 0.35]
    partial[2 * L:3 * L] = [1] * L  # one fully dropped row
    cases = [
        ("clean", [{"kind": "clean"}, {"kind": "clean"}]),
        ("scores_partial", [{"kind": "scores", "bits": partial}, {"kind": "clean"}]),
        ("weights_partial", [{"kind": "clean"}, {"kind": "weights", "bits": partial}]),
        ("all_dropped_then_skip", [{"kind": "all_dropped"}, {"kind": "skip"}]),
        ("skip_then_scores", [{"kind": "skip"}, {"kind": "scores", "bits": partial}]),
    ]
    records = [
        {"name": n, "tokens": tokens, "plans": plans, "logits": forward(t, cfg, tokens, plans).tolist()}
        for n, plans in cases
    ]
    json.dump(records, open(out + "/golden_logits.json", "w"), indent=1)


if __name__ == "__main__":
    main()
