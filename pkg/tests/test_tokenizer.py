import math

import numpy as np
import pytest
import torch

from treerec.config import (ConfigError, EncoderConfig, QuantizerConfig,
                            config_from_dict)
from treerec.corpus import Corpus, Item, InteractionSequence
from treerec.encoder import collate_items
from treerec.pipeline import corpus_for_run
from treerec.quantizer import nearest_code
from treerec.tokenizer import (CapacityError, ItemTokenizer, alignment_loss,
                               assign_identifiers, finetune_tokenizer,
                               load_identifier_map, load_tokenizer,
                               pretrain_tokenizer, save_identifier_map,
                               tokenizer_total_loss)

BASE_CFG = {
    "seed": 0,
    "corpus": {"synth": {"n_domains": 2, "clusters_per_domain": 2,
                          "items_per_cluster": 8, "text_vocab_size": 64,
                          "sequences_per_domain": 60, "n_patches": 3,
                          "patch_dim": 4, "text_len_min": 4, "text_len_max": 8,
                          "markov_temperature": 0.3},
                "pretrain_domains": [0], "downstream_domain": 1},
    "encoder": {"d": 24, "layers": 1, "heads": 2, "d_c": 8, "text_vocab": 64,
                 "d_v": 4, "n_patches": 3, "t_max": 12},
    "quantizer": {"k_root": 8, "k_leaf": 32, "L": 3, "data_init": True},
    "losses": {"mu": 1.0, "lam": 25.0},
    "tokenizer_train": {"batch_size": 8, "epochs_pretrain": 3,
                         "epochs_finetune": 2, "lr_pretrain": 1e-3,
                         "lr_finetune": 5e-4},
}


def run_cfg(**overrides):
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in BASE_CFG.items()}
    data["corpus"] = {**BASE_CFG["corpus"],
                      "synth": dict(BASE_CFG["corpus"]["synth"])}
    for dotted, value in overrides.items():
        node = data
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return config_from_dict(data)


@pytest.fixture(scope="module")
def corpus():
    return corpus_for_run(run_cfg())


# ---------------------------------------------------------------------------
# alignment loss


def test_alignment_matched_and_orthogonal_pair():
    e1 = torch.zeros(4, dtype=torch.float64)
    e2 = torch.zeros(4, dtype=torch.float64)
    e1[0], e2[1] = 1.0, 1.0
    h = torch.stack([e1, e2]).reshape(2, 1, 4).expand(2, 3, 4)
    loss = alignment_loss(h, h, tau=1.0)
    expected_per_level = math.log(1 + math.exp(-1.0))
    assert loss.item() == pytest.approx(3 * expected_per_level, rel=1e-9)


def test_alignment_all_equal_is_ln_B():
    v = torch.randn(6, dtype=torch.float64)
    h = v.expand(4, 2, 6)
    loss = alignment_loss(h, h, tau=0.37)
    assert loss.item() == pytest.approx(2 * math.log(4), rel=1e-9)


def test_alignment_is_scale_invariant():
    g = torch.Generator().manual_seed(0)
    h = torch.randn(5, 3, 8, generator=g, dtype=torch.float64)
    h_pos = torch.randn(5, 3, 8, generator=g, dtype=torch.float64)
    a = alignment_loss(h, h_pos, tau=0.07)
    b = alignment_loss(2.0 * h, 2.0 * h_pos, tau=0.07)
    assert a.item() == pytest.approx(b.item(), rel=1e-9)


def test_alignment_needs_negatives():
    h = torch.randn(1, 3, 8)
    with pytest.raises(ValueError):
        alignment_loss(h, h, tau=0.07)


# ---------------------------------------------------------------------------
# total loss composition


def make_model(cfg, seed=0):
    torch.manual_seed(seed)
    return ItemTokenizer(cfg.encoder, cfg.quantizer)


def batches_from(corpus, cfg, n=6):
    items = sorted(corpus.items.values(), key=lambda it: it.item_id)
    anchor = collate_items(items[:n], cfg.encoder)
    positive = collate_items(items[n: 2 * n], cfg.encoder)
    return anchor, positive


def test_total_loss_is_linear_in_components(corpus):
    cfg = run_cfg(**{"losses.lam": 25.0, "losses.mu": 0.7, "losses.eta": 0.09,
                     "losses.alpha": 2.0})
    model = make_model(cfg)
    anchor, positive = batches_from(corpus, cfg)
    total, comps = tokenizer_total_loss(model, anchor, positive, cfg.losses,
                                        generator=torch.Generator().manual_seed(3))
    recombined = (comps["raw"] + 25.0 * comps["code"] + 0.7 * comps["align"]
                  + 0.09 * comps["cooccur"])
    assert total.item() == pytest.approx(recombined.item(), rel=1e-7)

    # independently recompute the components in the same draw order
    g = torch.Generator().manual_seed(3)
    from treerec.decoders import raw_content_loss
    from treerec.quantizer import codebook_loss
    h = model.content(anchor)
    h_pos = model.content(positive)
    result, h_hat = model.discretize(h)
    l_raw, _ = raw_content_loss(model.text_decoder, model.image_decoder,
                                h_hat, anchor, 2.0, generator=g)
    l_code = codebook_loss(result)
    l_ali = alignment_loss(h, h_pos, cfg.losses.tau)
    l_re, _ = raw_content_loss(model.text_decoder, model.image_decoder,
                               h_hat, positive, 2.0, generator=g)
    manual = l_raw + 25.0 * l_code + 0.7 * l_ali + 0.09 * l_re
    assert total.item() == pytest.approx(manual.item(), rel=1e-7)


def test_total_loss_weighted_sum_fixture():
    comps = {"raw": 1.0, "code": 0.01, "align": 0.5, "cooccur": 0.8}
    lam, mu, eta = 200.0, 0.01, 0.03
    total = comps["raw"] + lam * comps["code"] + mu * comps["align"] + eta * comps["cooccur"]
    assert total == pytest.approx(3.029, abs=1e-12)


def test_mu_eta_zero_reduces_to_raw_plus_code(corpus):
    cfg = run_cfg(**{"losses.mu": 0.0, "losses.eta": 0.0})
    model = make_model(cfg)
    anchor, positive = batches_from(corpus, cfg)
    total, comps = tokenizer_total_loss(model, anchor, positive, cfg.losses,
                                        generator=torch.Generator().manual_seed(4))
    expected = comps["raw"] + cfg.losses.lam * comps["code"]
    assert total.item() == pytest.approx(expected.item(), rel=1e-9)


# ---------------------------------------------------------------------------
# training phases


def test_pretrain_reduces_loss_and_is_deterministic(corpus):
    cfg = run_cfg(**{"tokenizer_train.epochs_pretrain": 3,
                     "quantizer.data_init": False})
    ckpt_a = pretrain_tokenizer(corpus, cfg)
    ckpt_b = pretrain_tokenizer(corpus, cfg)
    hist = ckpt_a["history"]
    assert hist[-1]["total"] < hist[0]["total"]
    for key, tensor in ckpt_a["state"].items():
        assert torch.equal(tensor, ckpt_b["state"][key]), key
    assert ckpt_a["config_hash"] == ckpt_b["config_hash"]
    assert "utilization" in ckpt_a and ckpt_a["phase"] == "pretrain"


def test_pretrain_rejects_frozen_codebooks(corpus):
    cfg = run_cfg()
    model = make_model(cfg)
    model.quantizer.set_frozen_e(True)
    with pytest.raises(ConfigError):
        pretrain_tokenizer(corpus, cfg, model=model)


def test_finetune_freeze_contract(corpus):
    cfg = run_cfg()
    pre = pretrain_tokenizer(corpus, cfg)
    ft = finetune_tokenizer(pre, corpus, cfg)
    assert ft["frozen_e_during_training"] is True
    for name in ("quantizer.books.e_root", "quantizer.books.e_leaf"):
        assert torch.equal(ft["state"][name], pre["state"][name]), name
    for name in ("quantizer.books.w_root", "quantizer.books.w_leaf"):
        assert not torch.equal(ft["state"][name], pre["state"][name]), name


def test_finetune_zero_epochs_is_identity(corpus):
    cfg = run_cfg(**{"tokenizer_train.epochs_finetune": 0})
    pre = pretrain_tokenizer(corpus, cfg)
    ft = finetune_tokenizer(pre, corpus, cfg)
    for key, tensor in pre["state"].items():
        assert torch.equal(tensor, ft["state"][key]), key


def test_full_ft_updates_codebook_matrices(corpus):
    cfg = run_cfg(**{"tokenizer_train.full_ft": True})
    pre = pretrain_tokenizer(corpus, cfg)
    ft = finetune_tokenizer(pre, corpus, cfg)
    assert ft["frozen_e_during_training"] is False
    changed = any(
        not torch.equal(ft["state"][name], pre["state"][name])
        for name in ("quantizer.books.e_root", "quantizer.books.e_leaf"))
    assert changed


def test_finetune_rejects_L_mismatch(corpus):
    cfg = run_cfg()
    pre = pretrain_tokenizer(corpus, cfg)
    cfg4 = run_cfg(**{"quantizer.L": 4})
    with pytest.raises(ConfigError):
        finetune_tokenizer(pre, corpus, cfg4)


def test_checkpoint_round_trip(corpus):
    cfg = run_cfg()
    ckpt = pretrain_tokenizer(corpus, cfg)
    model = load_tokenizer(ckpt)
    anchor, _ = batches_from(corpus, cfg, n=4)
    codes_a = model.codes_for(anchor).codes
    codes_b = load_tokenizer(ckpt).codes_for(anchor).codes
    assert torch.equal(codes_a, codes_b)
    with pytest.raises(ValueError):
        load_tokenizer({**ckpt, "kind": "recommender"})
    with pytest.raises(ValueError):
        load_tokenizer({**ckpt, "format_version": 99})


# ---------------------------------------------------------------------------
# identifier assignment


def test_assignment_without_collisions_keeps_raw_codes(corpus):
    cfg = run_cfg()
    model = make_model(cfg, seed=2)
    items = dict(list(corpus.items.items())[:6])
    id_map = assign_identifiers(items, model)
    raw = model.codes_for(collate_items(
        sorted(items.values(), key=lambda it: it.item_id), cfg.encoder)).codes
    raw_tuples = [tuple(c) for c in raw.tolist()]
    if len(set(raw_tuples)) == len(raw_tuples):  # no natural collision
        for row, item_id in enumerate(sorted(items)):
            assert id_map[item_id].codes == raw_tuples[row]


def duplicate_item_corpus(cfg, n_dup=3):
    rng = np.random.default_rng(0)
    text = [1, 2, 3, 4]
    image = rng.normal(size=(cfg.encoder.n_patches, cfg.encoder.d_v))
    items = {i: Item(item_id=i, domain_id=0, text=list(text), image=image.copy())
             for i in range(n_dup)}
    return items


def test_three_way_collision_takes_three_nearest_leaf_codes(corpus):
    cfg = run_cfg()
    model = make_model(cfg, seed=3)
    items = duplicate_item_corpus(cfg, n_dup=3)
    id_map = assign_identifiers(items, model)

    batch = collate_items([items[0]], cfg.encoder)
    result = model.codes_for(batch)
    res_last = result.residuals[0, -1].double().numpy()
    leaf = model.quantizer.leaf_codebook().detach().double().numpy()
    order = np.argsort(((leaf - res_last) ** 2).sum(axis=1), kind="stable")

    natural_prefix = tuple(result.codes[0, :-1].tolist())
    for rank, item_id in enumerate(sorted(items)):
        ident = id_map[item_id]
        assert ident.codes[:-1] == natural_prefix  # prefixes never move
        assert ident.codes[-1] == int(order[rank])  # 1st/2nd/3rd nearest
    assert len({id_map[i].codes for i in items}) == 3


def test_assignment_is_injective_over_catalog(corpus):
    cfg = run_cfg()
    ckpt = pretrain_tokenizer(corpus, cfg)
    model = load_tokenizer(ckpt)
    id_map = assign_identifiers(corpus.items, model)
    assert len(id_map) == len(corpus.items)
    assert len({ident.codes for ident in id_map.values()}) == len(id_map)
    for ident in id_map.values():
        assert 0 <= ident.codes[0] < cfg.quantizer.k_root
        assert all(0 <= c < cfg.quantizer.k_leaf for c in ident.codes[1:])


def test_assignment_capacity_error():
    cfg = run_cfg(**{"quantizer.k_leaf": 2})
    model = make_model(cfg, seed=4)
    items = duplicate_item_corpus(cfg, n_dup=3)
    with pytest.raises(CapacityError):
        assign_identifiers(items, model)


def test_identifier_map_file_round_trip(tmp_path, corpus):
    cfg = run_cfg()
    model = make_model(cfg, seed=5)
    items = dict(list(corpus.items.items())[:5])
    id_map = assign_identifiers(items, model)
    path = tmp_path / "ids.jsonl"
    save_identifier_map(path, id_map, meta={"seed": 0})
    loaded = load_identifier_map(path)
    assert {i: v.codes for i, v in loaded.items()} == \
        {i: v.codes for i, v in id_map.items()}


def test_decoder_bottleneck_carries_semantics():
    """Trained discrete representations beat random ones on held-out text NLL.

    The decoder only locks onto the discrete bottleneck once codes are
    stable, so this one runs with a real training budget.
    """
    cfg = run_cfg(**{"tokenizer_train.epochs_pretrain": 200,
                     "corpus.synth.items_per_cluster": 24,
                     "corpus.synth.sequences_per_domain": 150,
                     "quantizer.k_leaf": 64})
    corpus = corpus_for_run(cfg)
    domain = cfg.corpus.pretrain_domains[0]
    in_domain = sorted(corpus.restrict_to_domains([domain]).items,
                       key=lambda i: i)
    held_out = set(in_domain[::4])
    visible = Corpus(
        items={i: it for i, it in corpus.items.items() if i not in held_out},
        sequences=[InteractionSequence(s.user_id,
                                       [i for i in s.items if i not in held_out])
                   for s in corpus.sequences])
    visible.sequences = [s for s in visible.sequences if len(s.items) >= 3]
    ckpt = pretrain_tokenizer(visible, cfg, domains=[domain])
    model = load_tokenizer(ckpt)

    items = [corpus.items[i] for i in sorted(held_out)]
    batch = collate_items(items, cfg.encoder)
    with torch.no_grad():
        _, h_hat = model.discretize(model.content(batch))
        trained_nll = model.text_decoder.loss(h_hat, batch).total.item()
        g = torch.Generator().manual_seed(0)
        random_h = torch.randn(h_hat.shape, generator=g) * h_hat.std()
        random_nll = model.text_decoder.loss(random_h, batch).total.item()
    assert trained_nll < random_nll
