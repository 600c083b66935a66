import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ganbert import bert
from ganbert.bert import BertConfig, BertError, Discriminator
from ganbert.checkpoint import load_discriminator, save_discriminator
from ganbert.tokenizer import MASK, TOTAL_LEN, VOCAB_SIZE, MaskPlan, assemble, plan_mask

TINY = dict(layers=2, hidden=32, heads=2, feedforward=64)


def model(seed=0, **kw):
    torch.manual_seed(seed)
    return Discriminator(BertConfig(**{**TINY, **kw})).eval()


def sequence(seed=0):
    rng = np.random.default_rng(seed)
    return assemble(rng.integers(1, 10_001, 512), rng.integers(1, 10_001, 512))


def ids_of(seq):
    return torch.from_numpy(seq.ids)[None]


class TestConfig:
    def test_base_geometry(self):
        c = BertConfig.base()
        assert (c.layers, c.hidden, c.heads) == (12, 768, 12)

    def test_invalid(self):
        with pytest.raises(BertError):
            BertConfig(hidden=30, heads=4)
        with pytest.raises(BertError):
            BertConfig(max_len=512)


class TestEncode:
    def test_shapes(self):
        m = model()
        seq = sequence()
        hidden = bert.encode(m, seq)
        assert hidden.shape == (TOTAL_LEN, 32)
        assert bert.nsp_logits(m, hidden).shape == (2,)
        _, plan = plan_mask(seq, 0)
        assert bert.mlm_logits(m, hidden, plan).shape == (154, VOCAB_SIZE)

    def test_deterministic(self):
        m = model()
        seq = sequence()
        with torch.no_grad():
            assert torch.equal(bert.encode(m, seq), bert.encode(m, seq))

    def test_position_sensitivity(self):
        m = model()
        ids = ids_of(sequence())
        swapped = ids.clone()
        swapped[0, [5, 9]] = ids[0, [9, 5]]
        with torch.no_grad():
            a, b = m.encode(ids), m.encode(swapped)
        # a permutation of the inputs is not a permutation of the outputs
        assert not torch.allclose(a[0, 5], b[0, 9], atol=1e-5)

    def test_bidirectional(self):
        m = model()
        ids = ids_of(sequence())
        later = ids.clone()
        later[0, 1000] = 1 + later[0, 1000] % 10_000
        with torch.no_grad():
            a, b = m.encode(ids), m.encode(later)
        # token 1 sees a change at position 1000 and vice versa
        assert not torch.allclose(a[0, 1], b[0, 1])
        earlier = ids.clone()
        earlier[0, 1] = 1 + earlier[0, 1] % 10_000
        with torch.no_grad():
            c = m.encode(earlier)
        assert not torch.allclose(a[0, 1000], c[0, 1000])

    def test_segment_swap_changes_output(self):
        m = model()
        seq = sequence()
        seg = torch.from_numpy(seq.segments)[None]
        swapped = seg.clone()
        swapped[0, 1:513], swapped[0, 514:1026] = seg[0, 514:1026], seg[0, 1:513]
        with torch.no_grad():
            a = m.encode(ids_of(seq), seg)
            b = m.encode(ids_of(seq), swapped)
        assert not torch.allclose(a, b)

    def test_rejects_bad_ids(self):
        m = model()
        ids = ids_of(sequence())
        ids[0, 3] = VOCAB_SIZE
        with pytest.raises(BertError):
            m.encode(ids)
        with pytest.raises(BertError):
            m.encode(ids[0])

    def test_empty_mask_plan(self):
        m = model()
        hidden = bert.encode(m, sequence())
        empty = MaskPlan(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        with pytest.raises(BertError):
            bert.mlm_logits(m, hidden, empty)


class TestHeads:
    def test_softmax_sums_to_one(self):
        m = model()
        seq = sequence()
        _, plan = plan_mask(seq, 1)
        with torch.no_grad():
            hidden = bert.encode(m, seq)
            nsp = F.softmax(bert.nsp_logits(m, hidden), -1)
            mlm = F.softmax(bert.mlm_logits(m, hidden, plan), -1)
        assert float(nsp.sum()) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(mlm.sum(-1).numpy(), 1.0, atol=1e-5)

    def test_uniform_logits_cross_entropy(self):
        m = model()
        with torch.no_grad():
            m.mlm_head.weight.zero_()
            m.mlm_head.bias.zero_()
        seq = sequence()
        masked, plan = plan_mask(seq, 2)
        with torch.no_grad():
            logits = bert.mlm_logits(m, bert.encode(m, masked), plan)
        loss = bert.mlm_loss(logits, torch.from_numpy(plan.original_ids))
        assert float(loss) == pytest.approx(math.log(VOCAB_SIZE), abs=1e-5)

    def test_finite_difference_spot_check(self):
        m = model().double()
        seq = sequence()
        ids = ids_of(seq)
        target = torch.tensor([1])

        def loss():
            nsp, _ = m(ids)
            return F.cross_entropy(nsp, target)

        m.zero_grad()
        loss().backward()
        rng = np.random.default_rng(0)
        checks = [
            (m.token_embedding.weight, (int(seq.ids[7]), 3)),
            (m.position_embedding.weight, (0, 5)),
            (m.pooler[0].weight, (1, 2)),
            (m.nsp_head.bias, (1,)),
        ]
        layer = m.encoder.layers[0]
        checks.append((layer.linear1.weight, tuple(int(i) for i in rng.integers(0, 32, 2))))
        h = 1e-6
        for param, idx in checks:
            analytic = float(param.grad[idx])
            with torch.no_grad():
                orig = float(param[idx])
                param[idx] = orig + h
                up = float(loss())
                param[idx] = orig - h
                down = float(loss())
                param[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - analytic) <= 1e-3 * max(abs(analytic), 1e-4), (idx, fd, analytic)

    def test_ste_carries_gradient(self):
        m = model()
        ids = ids_of(sequence())
        ste = torch.zeros(ids.shape, requires_grad=True)
        nsp, _ = m(ids, ste=ste)
        nsp[0, 1].backward()
        assert ste.grad[0, 514:1026].abs().sum() > 0

    def test_ste_zero_is_identity(self):
        m = model()
        ids = ids_of(sequence())
        with torch.no_grad():
            a, _ = m(ids)
            b, _ = m(ids, ste=torch.zeros(ids.shape))
        assert torch.equal(a, b)

    def test_mlm_overfits_fixed_sequence(self):
        torch.manual_seed(0)
        m = Discriminator(BertConfig(layers=2, hidden=64, heads=2, feedforward=128))
        seq = sequence(5)
        masked, plan = plan_mask(seq, 3)
        assert np.all(masked.ids[plan.masked_positions] == MASK)
        ids = ids_of(masked)
        positions = torch.from_numpy(plan.masked_positions)[None]
        targets = torch.from_numpy(plan.original_ids)
        opt = torch.optim.Adam(m.parameters(), lr=3e-3)
        for _ in range(200):
            opt.zero_grad()
            _, logits = m(ids, mlm_positions=positions)
            bert.mlm_loss(logits, targets).backward()
            opt.step()
        m.eval()
        with torch.no_grad():
            _, logits = m(ids, mlm_positions=positions)
        acc = float((logits[0].argmax(-1) == targets).float().mean())
        assert acc >= 0.95


def test_checkpoint_round_trip(tmp_path):
    m = model()
    save_discriminator(tmp_path / "d.pt", m)
    back = load_discriminator(tmp_path / "d.pt").eval()
    ids = ids_of(sequence())
    with torch.no_grad():
        assert torch.equal(back(ids)[0], m(ids)[0])
