import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lip2speech import evaluation as ev
from lip2speech.errors import DependencyError, InvalidInputError


def dp_oracle(a, b):
    # full-table Wagner-Fischer, independent of the rolling-row implementation
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i, j in itertools.product(range(1, len(a) + 1), range(1, len(b) + 1)):
        d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]


def test_identical_is_zero():
    assert ev.error_rates("bin blue at f two now", "bin blue at f two now") == 0.0


def test_one_substitution_in_six_words():
    assert ev.error_rates("bin blue at g two now", "bin blue at f two now") == pytest.approx(16.667, abs=1e-3)


def test_deleting_k_of_n_words():
    ref = "a b c d e f g h"
    assert ev.error_rates("a b c d e", ref) == pytest.approx(100 * 3 / 8)


def test_random_pairs_match_dp(rng):
    for _ in range(200):
        a = "".join(rng.choice(list("abc "), size=rng.integers(0, 10)))
        b = "".join(rng.choice(list("abc "), size=rng.integers(1, 10)))
        b = b if b.strip() else "a"
        assert ev.edit_distance(list(a), list(b)) == dp_oracle(a, b)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="xyz", max_size=8), st.text(alphabet="xyz", max_size=8))
def test_distance_symmetric(a, b):
    assert ev.edit_distance(a, b) == ev.edit_distance(b, a) == dp_oracle(a, b)


def test_normalisation_and_units():
    assert ev.normalise_text("Hello, World!") == "hello world"
    assert ev.error_rates("ab", "abc", unit="char") == pytest.approx(100 / 3)
    g2p = ev.LexiconG2P({"ama": ["a", "m", "a"], "oso": ["o", "s", "o"]})
    assert ev.error_rates("ama", "oso", unit="phoneme", g2p=g2p) == pytest.approx(100.0)
    with pytest.raises(InvalidInputError):
        ev.error_rates("x", "")
    with pytest.raises(InvalidInputError):
        ev.error_rates("x", "y", unit="syllable")


def test_corpus_rate_pools_tokens():
    assert ev.corpus_error_rate(["a b", "c"], ["a x", "c d e"], "word") == pytest.approx(300 / 5)


def test_moments_symmetric_values():
    m = ev.pitch_moments([-1.0, 0.0, 1.0])
    assert m.mean == 0.0 and m.skewness == 0.0
    assert m.std == pytest.approx(1.0)
    assert m.excess_kurtosis == pytest.approx(1.5 - 3.0)


def test_moments_on_normal_draws():
    m = ev.pitch_moments(np.random.default_rng(0).standard_normal(100_000))
    assert abs(m.skewness) < 0.05 and abs(m.excess_kurtosis) < 0.05


def test_moments_match_scipy(rng):
    from scipy import stats

    x = rng.gamma(2.0, 30.0, 5000)
    m = ev.pitch_moments(x)
    assert m.skewness == pytest.approx(stats.skew(x), rel=1e-10)
    assert m.excess_kurtosis == pytest.approx(stats.kurtosis(x), rel=1e-10)
    assert m.std == pytest.approx(np.std(x, ddof=1), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(50, 400), min_size=3, max_size=40, unique=True), st.randoms())
def test_moments_permutation_invariant(values, r):
    shuffled = list(values)
    r.shuffle(shuffled)
    a, b = ev.pitch_moments(values), ev.pitch_moments(shuffled)
    for x, y in zip((a.mean, a.std, a.skewness, a.excess_kurtosis),
                    (b.mean, b.std, b.skewness, b.excess_kurtosis)):
        assert x == pytest.approx(y, rel=1e-9, abs=1e-9)


def test_moments_drop_unvoiced_and_reject_constant():
    m = ev.pitch_moments([np.nan, 100.0, 200.0, np.nan])
    assert m.mean == 150.0
    with pytest.raises(InvalidInputError):
        ev.pitch_moments([120.0, 120.0, 120.0])


def test_table_row_layout():
    row = ev.PitchMoments(77.9, 101.84, 0.696, -1.217).row("GT")
    assert row == "GT & 77.90 & 101.84 & 0.696 & -1.217"


def test_pooled_vs_per_utterance():
    a, b = np.array([100.0, 110, 130]), np.array([200.0, 230, 240, 250])
    pooled = ev.pooled_pitch_moments([a, b])
    assert pooled.mean == pytest.approx(np.concatenate([a, b]).mean())
    per = ev.pooled_pitch_moments([a, b], per_utterance=True)
    assert per.mean == pytest.approx((a.mean() + b.mean()) / 2)


def test_energy_mae_cases(rng):
    x = rng.random(50)
    assert ev.energy_mae(x, x) == 0.0
    assert ev.energy_mae(x + 0.5, x) == pytest.approx(0.5)
    y = rng.random(50)
    loop = sum(abs(float(p) - float(q)) for p, q in zip(x, y)) / 50
    assert abs(ev.energy_mae(x, y) - loop) < 1e-9
    assert ev.energy_mae(x[:40], y) == pytest.approx(np.mean(np.abs(x[:40] - y[:40])))
    with pytest.raises(InvalidInputError):
        ev.energy_mae([], [1.0])


def test_echo_asr():
    asr = ev.EchoASR({"u1": "bin blue"})
    asr.inject("set red")
    assert asr.transcribe(np.zeros(10), key="u1") == "bin blue"
    assert ev.asr_transcribe(np.zeros(10), asr) == "set red" == ev.asr_transcribe(np.zeros(3), asr)


def test_asr_backends_unavailable():
    with pytest.raises(DependencyError):
        ev.get_asr("whisper")
    with pytest.raises(DependencyError):
        ev.get_asr("external-cmd", command="definitely-not-a-binary-xyz {wav}")


def test_external_asr_command(tmp_path):
    asr = ev.get_asr("external-cmd", command="echo hello there")
    assert asr.transcribe(np.zeros(1600)) == "hello there"


def test_report_clips_rates():
    rep = ev.EvalReport(3, wer=120.0, cer=5.0)
    assert rep.wer == 100.0 and rep.to_dict()["cer"] == 5.0
    with pytest.raises(InvalidInputError):
        ev.EvalReport(0)


def _read_png(path):
    import matplotlib.image as mpimg

    return mpimg.imread(path)


def test_identical_mels_give_identical_panels(tmp_path, rng):
    mel = rng.normal(-5, 2, (60, 80))
    fig = ev.plot_mel_comparison([("a", mel), ("b", mel)], tmp_path / "p.png", ncols=2)
    axes = [ax for ax in fig.axes if ax.images]
    np.testing.assert_array_equal(axes[0].images[0].get_array(), axes[1].images[0].get_array())
    assert axes[0].images[0].get_clim() == axes[1].images[0].get_clim()
    img = _read_png(tmp_path / "p.png")
    h, w = img.shape[:2]
    fig.canvas.draw()
    boxes = [ax.get_window_extent() for ax in axes]
    crops = []
    for bb in boxes:
        x0, x1 = int(round(bb.x0)) + 2, int(round(bb.x1)) - 2
        y0, y1 = h - int(round(bb.y1)) + 2, h - int(round(bb.y0)) - 2
        crops.append(img[y0:y1, x0:x1])
    np.testing.assert_array_equal(crops[0], crops[1])


def test_plot_is_deterministic(tmp_path, rng):
    mels = [(n, rng.normal(-5, 2, (40, 80))) for n in "abc"]
    ev.plot_mel_comparison(mels, tmp_path / "a.png")
    ev.plot_mel_comparison(mels, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_six_panel_grid(tmp_path, rng):
    names = ["GT", "vocoded", "sys1", "sys2", "sys3", "ours"]
    fig = ev.plot_mel_comparison({n: rng.normal(size=(30, 80)) for n in names}, tmp_path / "f.png")
    axes = [ax for ax in fig.axes if ax.images]
    assert len(axes) == 6
    geo = {ax.get_subplotspec().get_geometry()[:2] for ax in axes}
    assert geo == {(2, 3)}
    assert [ax.get_title() for ax in axes] == names


def test_plot_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        ev.plot_mel_comparison([], tmp_path / "x.png")
    with pytest.raises(InvalidInputError):
        ev.plot_mel_comparison([("a", np.zeros((5, 80))), ("b", np.zeros((5, 40)))], tmp_path / "x.png")
