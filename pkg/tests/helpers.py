"""Test scaffolding shared by the unit and acceptance suites."""
import numpy as np
import torch

from oracles import finite_difference_gradient
from picante.encoding import EncodingConfig, encode_inputs, encode_outputs
from picante.model import ModelConfig, Seq2Seq, decoder_inputs, loss_fn


def miniature_setup(seed=0):
    """dims 16/8, vocab 20, n=3, in float64."""
    enc = EncodingConfig(q=17, k=2, base_B=9, bucket_r=1)  # vocab 2 + 9 + 3 = 14
    cfg = ModelConfig(vocab_size=20, max_input_len=6, enc_embed_dim=16, dec_embed_dim=8,
                      enc_heads=4, dec_heads=2, cross_heads=2, dec_shared_iterations=3, seed=seed)
    model = Seq2Seq(cfg).double()
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 17, size=(4, 3))
    b = rng.integers(0, 17, size=4)
    src = torch.from_numpy(encode_inputs(a, enc))
    tgt = torch.from_numpy(encode_outputs(b, enc))
    return model, src, tgt, enc


def gradient_check_errors(seed=0, entries=4, step=1e-4):
    """||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, 1e-7) per parameter tensor.

    The floor matters for key-projection biases, whose true gradient is exactly
    zero (softmax ignores a shift shared by all keys); there the check is an
    absolute one.
    """
    model, src, tgt, enc = miniature_setup(seed)

    def f():
        with torch.no_grad():
            return loss_fn(model(src, decoder_inputs(tgt, enc.bos)), tgt).item()

    model.zero_grad()
    loss_fn(model(src, decoder_inputs(tgt, enc.bos)), tgt).backward()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(seed)
    indices = {}
    for name, p in params.items():
        g = p.grad.view(-1).abs().numpy()
        # include the largest-gradient entry so no tensor is checked only at zeros
        picks = set(rng.choice(p.numel(), size=min(entries, p.numel()), replace=False).tolist())
        picks.add(int(g.argmax()))
        indices[name] = sorted(picks)
    fd = finite_difference_gradient(f, params, indices, step)
    errors = {}
    for name, p in params.items():
        auto = p.grad.view(-1)[indices[name]].numpy()
        scale = max(np.linalg.norm(auto), np.linalg.norm(fd[name]))
        errors[name] = np.linalg.norm(auto - fd[name]) / max(scale, 1e-7)
    return errors
