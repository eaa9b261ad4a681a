import numpy as np
import pytest

from pmisim.codebook import CodebookConfig, build_codebook
from pmisim.csi import (
    PmiSelection,
    build_report,
    candidate_se,
    select_pmi_batch,
    ue_select_pmi,
)
from pmisim.errors import DomainError, StateError
from pmisim.phy import precoded_snr, spectral_efficiency
from pmisim.utils import complex_normal, keyed_rng


@pytest.fixture(scope="module")
def codebook():
    return build_codebook(CodebookConfig())


def exhaustive_selection(h_subbands, codebook, sigma2):
    best = {}
    for rank in (1, 2):
        per_subband = []
        for h in h_subbands:
            top_j, top_se = 0, -1.0
            for j, w in enumerate(codebook.stack(rank)):
                se = spectral_efficiency(rank, precoded_snr(h, w, sigma2))
                if se > top_se:
                    top_j, top_se = j, se
            per_subband.append((top_j, top_se))
        best[rank] = per_subband
    total = {r: sum(se for _, se in best[r]) for r in (1, 2)}
    ri = 2 if total[2] > total[1] else 1
    return ri, [j for j, _ in best[ri]]


def test_matches_exhaustive_search(codebook):
    rng = keyed_rng(21)
    for _ in range(1000):
        h = complex_normal(rng, (1, 2, 8))
        selection = ue_select_pmi(h, codebook, 0.1)
        assert (selection.ri, selection.pmi) == exhaustive_selection(
            h, codebook, 0.1
        )


def test_batch_matches_single(codebook):
    rng = keyed_rng(22)
    h = complex_normal(rng, (5, 6, 2, 8))
    ri, pmi, se = select_pmi_batch(h, codebook, 0.1)
    assert ri.shape == (5,)
    assert pmi.shape == se.shape == (5, 6)
    for u in range(5):
        single = ue_select_pmi(h[u], codebook, 0.1)
        assert single.ri == ri[u]
        assert single.pmi == list(pmi[u])


def test_reported_se_is_the_best_candidate(codebook):
    rng = keyed_rng(23)
    h = complex_normal(rng, (6, 2, 8))
    selection = ue_select_pmi(h, codebook, 0.1)
    se1, se2 = candidate_se(h, codebook, 0.1)
    chosen = se1 if selection.ri == 1 else se2
    for s in range(6):
        assert selection.se[s] == pytest.approx(chosen[s].max(), rel=1e-12)
        assert selection.pmi[s] == int(np.argmax(chosen[s]))


def test_argmax_invariant_to_noise_scaling(codebook):
    rng = keyed_rng(24)
    h = complex_normal(rng, (50, 6, 2, 8))
    low = candidate_se(h, codebook, 0.1)
    high = candidate_se(h, codebook, 0.4)
    for a, b in zip(low, high):
        assert np.array_equal(np.argmax(a, axis=-1), np.argmax(b, axis=-1))


def test_single_entry_codebook(codebook):
    tiny = codebook.truncated(1, 0)
    rng = keyed_rng(25)
    selection = ue_select_pmi(complex_normal(rng, (6, 2, 8)), tiny, 0.1)
    assert selection.ri == 1
    assert selection.pmi == [0] * 6


def test_rank_one_channel_reports_rank_one(codebook):
    rng = keyed_rng(26)
    rank_one = 0
    for _ in range(1000):
        a = complex_normal(rng, 2)
        b = complex_normal(rng, 8)
        h = np.outer(a, np.conj(b))[None]
        rank_one += ue_select_pmi(h, codebook, 0.1).ri == 1
    assert rank_one >= 950


def test_noise_must_be_positive(codebook):
    with pytest.raises(DomainError):
        candidate_se(np.zeros((1, 2, 8)), codebook, 0.0)


def make_selection(pmi, ri=1):
    return PmiSelection(ri, pmi, [1.0] * len(pmi))


def test_build_report(codebook):
    report = build_report(
        ue=4,
        pci=2,
        tti=9,
        selection=make_selection([1, 2, 3]),
        num_subbands=3,
        subband_cqi=[7, 8, 9],
        wb_cqi=8,
        rsrp_dbm=-101.5,
        thr_mbps=0.75,
        interf_mw=np.array([1e-13, 2e-13]),
        prbs=6,
        codebook=codebook,
    )
    assert report.tti == 9
    assert report.pmi == [1, 2, 3]
    assert report.cqi == [7, 8, 9]
    assert report.interf_mw == [1e-13, 2e-13]
    assert report.prbs == 6


def test_build_report_rejects_incomplete_csi(codebook):
    common = dict(
        ue=4, pci=2, tti=9, wb_cqi=8, rsrp_dbm=-90.0, thr_mbps=0.0, interf_mw=[]
    )
    with pytest.raises(StateError):
        build_report(
            selection=make_selection([1, 2]), num_subbands=3,
            subband_cqi=[1, 1, 1], **common,
        )
    with pytest.raises(StateError):
        build_report(
            selection=make_selection([1, 2, 3]), num_subbands=3,
            subband_cqi=[1, 1], **common,
        )
    with pytest.raises(StateError):
        build_report(
            selection=make_selection([1, 2, 64]), num_subbands=3,
            subband_cqi=[1, 1, 1], codebook=codebook, **common,
        )
