import pytest

from atlasaug.ablation import (
    VARIANTS,
    AblationResult,
    ablation_document,
    expected_ordering_holds,
    parse_variants,
    rank_results,
    run_ablation,
    run_registration_ablation,
    run_scarcity,
    variant_config,
)
from atlasaug.evaluation import EvalReport
from atlasaug.exceptions import AblationError, ConfigError, NonFiniteLossError
from atlasaug.phantom import PhantomSpec, make_cohort
from atlasaug.trainer import Trainer
from tests.helpers import fast_mode_config, tiny_config


def result(variant, mean):
    report = EvalReport(per_class_dice={}, mean=mean, std=0.0, min=mean, max=mean)
    return AblationResult(variant=variant, report=report, config_hash="0" * 12)


@pytest.mark.parametrize(
    "variant, sampling, rectification", [(variant, *toggles) for variant, toggles in VARIANTS.items()]
)
def test_variant_config(variant, sampling, rectification):
    base = tiny_config(lambda_rec=0.25)
    config = variant_config(base, variant)
    assert (config.sampling, config.rectification) == (sampling, rectification)
    assert config.replace(sampling=base.sampling, rectification=base.rectification) == base


def test_variant_configs_hash_differently():
    hashes = {variant_config(tiny_config(), variant).config_hash() for variant in VARIANTS}
    assert len(hashes) == len(VARIANTS)


def test_unknown_variant_config():
    with pytest.raises(ConfigError):
        variant_config(tiny_config(), "everything")


def test_parse_variants():
    assert parse_variants(" vanilla, adv+ler ,") == ["vanilla", "adv+ler"]


@pytest.mark.parametrize("text", ["", " , ", "vanilla,vanilla", "vanilla,mixup"])
def test_parse_variants_rejects(text):
    with pytest.raises(ConfigError):
        parse_variants(text)


def test_ranking_and_ordering():
    results = [result("vanilla", 0.4), result("adv+ler", 0.6), result("beta", 0.5)]
    assert [r.variant for r in rank_results(results)] == ["adv+ler", "beta", "vanilla"]
    assert expected_ordering_holds(results) is True
    assert expected_ordering_holds([result("vanilla", 0.7), result("adv+ler", 0.6)]) is False
    assert expected_ordering_holds(results[1:]) is None


def test_ablation_document():
    document = ablation_document([result("vanilla", 0.4), result("adv+ler", 0.6)])
    assert [entry["variant"] for entry in document["results"]] == ["adv+ler", "vanilla"]
    assert document["ordering_holds"] is True
    assert document["results"][0]["report"]["mean"] == 0.6


def test_run_ablation(cohort, tmp_path):
    base = tiny_config(n_iterations=1)
    results = run_ablation(cohort, ["adv+ler", "vanilla"], base, output_dir=tmp_path)
    assert [r.variant for r in results] == ["adv+ler", "vanilla"]
    expected = [variant_config(base, variant).config_hash() for variant in ("adv+ler", "vanilla")]
    assert [r.config_hash for r in results] == expected
    for r in results:
        assert 0.0 <= r.report.mean <= 1.0
        assert len(r.report.per_subject) == len(cohort.heldout)
        assert (tmp_path / r.variant / "final.pt").exists()


def test_run_ablation_is_deterministic(cohort):
    base = tiny_config(n_iterations=1)
    first = run_ablation(cohort, ["beta"], base)
    second = run_ablation(cohort, ["beta"], base)
    assert first == second


def test_failed_variant_is_named(cohort, monkeypatch):
    def fail(self, *args, **kwargs):
        raise NonFiniteLossError("segmenter loss is not finite", iteration=0, phase="segmenter")

    monkeypatch.setattr(Trainer, "train", fail)
    with pytest.raises(AblationError) as exc_info:
        run_ablation(cohort, ["ler"], tiny_config(n_iterations=1))
    error = exc_info.value
    assert error.variant == "ler"
    assert isinstance(error.__cause__, NonFiniteLossError)
    assert str(error) == "variant 'ler': segmenter loss is not finite [iteration 0, phase segmenter]"


def test_registration_ablation(cohort):
    document = run_registration_ablation(cohort, tiny_config(n_iterations=1))
    assert [entry["variant"] for entry in document["results"]] == ["reg-bi", "reg-bi+fb"]
    for entry in document["results"]:
        assert 0.0 <= entry["warped_label_dice"] <= 1.0
        assert entry["inverse_consistency_residual"] >= 0.0
    assert document["results"][0]["config_hash"] != document["results"][1]["config_hash"]


def test_unknown_registration_variant(cohort):
    with pytest.raises(ConfigError):
        run_registration_ablation(cohort, tiny_config(n_iterations=1), variants=["reg-none"])


def test_scarcity(cohort):
    document = run_scarcity(cohort, [2, 1, 2], tiny_config(n_iterations=1), variants=["vanilla"])
    points = [(point["count"], point["variant"]) for point in document["series"]]
    assert points == [(1, "vanilla"), (2, "vanilla")]
    series = {point["count"]: point["mean_dice"] for point in document["series"]}
    assert document["drop"] == {"vanilla": pytest.approx(series[2] - series[1])}


@pytest.mark.parametrize("counts", [[], [0, 1], [5]])
def test_scarcity_counts_out_of_range(cohort, counts):
    with pytest.raises(ConfigError):
        run_scarcity(cohort, counts, tiny_config(n_iterations=1))


@pytest.fixture(scope="module", params=[0, 1])
def fast_cohort(request):
    """64x64 slices with nine structures, 20 unlabeled and 8 heldout subjects."""
    return make_cohort(PhantomSpec.fast_2d(seed=request.param), n_unlabeled=20, n_heldout=8)


@pytest.mark.slow
def test_full_method_beats_vanilla(fast_cohort):
    seed = fast_cohort.manifest.spec.seed
    results = run_ablation(fast_cohort, ["vanilla", "adv+ler"], fast_mode_config(seed=seed))
    means = {result.variant: result.report.mean for result in results}
    assert means["adv+ler"] >= 0.80
    assert means["adv+ler"] >= means["vanilla"] + 0.02


@pytest.mark.slow
def test_augmentation_softens_the_data_scarcity_drop(fast_cohort):
    seed = fast_cohort.manifest.spec.seed
    document = run_scarcity(fast_cohort, [5, 20], fast_mode_config(seed=seed))
    # drop = Dice at 20 unlabeled images minus Dice at 5
    assert document["drop"]["adv"] <= document["drop"]["vanilla"] + 0.01


@pytest.mark.slow
def test_forward_backward_consistency_keeps_dice_and_lowers_the_residual(fast_cohort):
    base = fast_mode_config(seed=fast_cohort.manifest.spec.seed)
    entries = {entry["variant"]: entry for entry in run_registration_ablation(fast_cohort, base)["results"]}
    bi, fb = entries["reg-bi"], entries["reg-bi+fb"]
    assert fb["warped_label_dice"] >= bi["warped_label_dice"] - 0.005
    assert fb["inverse_consistency_residual"] <= 0.9 * bi["inverse_consistency_residual"]
