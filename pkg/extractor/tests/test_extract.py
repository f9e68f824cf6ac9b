"""Extractor acceptance: output loads under the primary loader, weight
sums match t x sharing-heads, and the fidelity pipeline runs end to end
on an extracted dump."""

import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from kvextract.extract import ExtractSpec, extract, extract_from_model

from pqpim.kvstore import load_kv_dump


N_Q_HEADS = 4
N_KV_HEADS = 2
GROUP = N_Q_HEADS // N_KV_HEADS


@pytest.fixture(scope="module")
def tiny_model():
    from transformers import LlamaConfig, LlamaForCausalLM

    cfg = LlamaConfig(
        vocab_size=256,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=N_Q_HEADS,
        num_key_value_heads=N_KV_HEADS,
        max_position_embeddings=256,
        attn_implementation="eager",
    )
    torch.manual_seed(1234)
    return LlamaForCausalLM(cfg).eval()


@pytest.fixture
def extracted(tiny_model, tmp_path):
    spec = ExtractSpec(model="tiny", token_ids=list(range(2, 50)),
                       t=8, out=str(tmp_path / "tiny.aqkv"))
    return extract(spec, model=tiny_model)


def test_output_loads_under_primary_loader(extracted):
    dump = load_kv_dump(extracted)
    dump.validate()
    assert dump.n_layers == 2
    assert dump.n_kv_heads == N_KV_HEADS
    assert dump.n_tokens == 48
    assert dump.head_dim == 16
    assert dump.weights is not None


def test_weight_sums_match_t_times_sharing_heads(extracted):
    dump = load_kv_dump(extracted)
    sums = dump.weights.sum(axis=2)
    np.testing.assert_allclose(sums, 8 * GROUP, atol=1e-3)
    assert (dump.weights >= 0).all()


def test_two_token_prompt_minimal_t(tiny_model, tmp_path):
    spec = ExtractSpec(model="tiny", token_ids=[5, 9], t=1,
                       out=str(tmp_path / "two.aqkv"))
    dump = load_kv_dump(extract(spec, model=tiny_model))
    sums = dump.weights.sum(axis=2)
    np.testing.assert_allclose(sums, 1 * GROUP, atol=1e-4)


def test_repeat_extraction_is_deterministic(tiny_model, tmp_path):
    spec = ExtractSpec(model="tiny", token_ids=list(range(3, 40)), t=4,
                       out=str(tmp_path / "a.aqkv"))
    d1 = load_kv_dump(extract(spec, model=tiny_model))
    spec.out = str(tmp_path / "b.aqkv")
    d2 = load_kv_dump(extract(spec, model=tiny_model))
    np.testing.assert_allclose(d1.keys, d2.keys, atol=1e-6)
    np.testing.assert_allclose(d1.weights, d2.weights, atol=1e-6)


def test_layer_subset(tiny_model, tmp_path):
    spec = ExtractSpec(model="tiny", token_ids=list(range(2, 30)), t=4,
                       layers=[1], out=str(tmp_path / "l1.aqkv"))
    dump = load_kv_dump(extract(spec, model=tiny_model))
    assert dump.n_layers == 1


def test_t_longer_than_prompt_rejected(tiny_model, tmp_path):
    spec = ExtractSpec(model="tiny", token_ids=[1, 2, 3], t=9,
                       out=str(tmp_path / "x.aqkv"))
    with pytest.raises(ValueError):
        extract(spec, model=tiny_model)


def test_weights_are_true_score_sums(tiny_model):
    ids = torch.tensor(list(range(2, 26)))[None, :]
    keys, values, weights = extract_from_model(tiny_model, ids, t=5)
    with torch.no_grad():
        out = tiny_model(ids, output_attentions=True)
    for layer in range(2):
        scores = out.attentions[layer][0].numpy()
        for kv in range(N_KV_HEADS):
            manual = np.zeros(24)
            for g in range(GROUP):
                qh = kv * GROUP + g
                manual += scores[qh][-5:, :].sum(axis=0)
            np.testing.assert_allclose(weights[layer, kv], manual,
                                       rtol=1e-5, atol=1e-6)


def test_end_to_end_fidelity_on_extracted_dump(extracted, tmp_path):
    """[SECONDARY] smoke: cmd_fidelity completes on an extractor dump and
    reports a positive output cosine."""
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "pq": {"m": 4, "k": 8, "iters": 3, "sink_tokens": 2,
               "recent_tokens": 4},
        "fidelity": {"arms": ["standard", "full"], "seeds": 2,
                     "n_queries": 4},
    }))
    out = tmp_path / "fid"
    proc = subprocess.run(
        [sys.executable, "-m", "pqpim.cli", "fidelity",
         "--config", str(config), "--seed", "3",
         "--dump", extracted, "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    rows = (out / "fidelity.csv").read_text().strip().splitlines()[1:]
    assert len(rows) == 4
    for row in rows:
        cos = float(row.split(",")[3])
        assert cos > 0
    print("ACCEPTANCE extractor-roundtrip: PASS "
          f"(fidelity rows {len(rows)}, cos > 0)")
