import pytest

from suffbench.corpus import subset
from suffbench.gateway import Gateway, GenerationResult, ModelEndpoint
from suffbench.pipeline import (
    EXCLUSION_EVENTS,
    PipelineError,
    RunContext,
    StageFailure,
    expand_stages,
    exclusion_keys,
    plan_generate,
    run,
    run_stage,
)
from suffbench.prompts import load_template_set
from suffbench.runstore import (
    AUDIT,
    EXPLANATIONS,
    MASKS,
    SCORES,
    SIMILARITY,
    RunManifest,
    RunStore,
)

RUN = "run-pipe"

GEN = ModelEndpoint(base_url="mock://11", model_id="gen-1")
GEN_B = ModelEndpoint(base_url="mock://11", model_id="gen-2")
PROBE = ModelEndpoint(base_url="mock://12", model_id="probe-1")
EMBED = ModelEndpoint(base_url="mock://13", model_id="embed-1")

TEMPLATES = {
    "en": load_template_set("default-v1", "en"),
    "fa": load_template_set("default-v1", "fa"),
}


def make_ctx(
    tmp_path,
    corpora,
    *,
    levels=(10, 90),
    generators=(GEN,),
    workers=2,
    gateway=None,
    store=None,
):
    if store is None:
        store = RunStore.open_or_create(
            tmp_path / "store", RunManifest.new(RUN, {"levels": list(levels)})
        )
    return RunContext(
        store=store,
        gateway=gateway or Gateway(),
        corpora=dict(corpora),
        generators=tuple(generators),
        scorer=PROBE,
        embedder=EMBED,
        templates={k: TEMPLATES[k] for k in corpora},
        levels=tuple(levels),
        workers=workers,
    )


def store_bytes(root):
    return {
        name: (root / name).read_bytes()
        for name in (EXPLANATIONS, MASKS, SCORES, SIMILARITY, "aggregates.csv", AUDIT)
    }


class TestStageGraph:
    def test_single_stage_no_deps(self):
        assert expand_stages(["generate"]) == ("generate",)

    def test_transitive_deps_in_order(self):
        assert expand_stages(["score"]) == ("generate", "constrain", "mask", "score")

    def test_aggregate_pulls_everything(self):
        assert expand_stages(["aggregate"]) == (
            "generate", "constrain", "mask", "score", "similarity", "aggregate",
        )

    def test_duplicates_collapse(self):
        assert expand_stages(["mask", "constrain", "mask"]) == (
            "generate", "constrain", "mask",
        )

    def test_unknown_stage_rejected(self):
        with pytest.raises(PipelineError, match="unknown stage"):
            expand_stages(["polish"])


class TestContextValidation:
    def test_needs_generators(self, tmp_path, en_corpus):
        with pytest.raises(PipelineError, match="generator"):
            make_ctx(tmp_path, {"en": en_corpus}, generators=())

    def test_language_mismatch(self, tmp_path, en_corpus, fa_corpus):
        store = RunStore.open_or_create(tmp_path / "s", RunManifest.new(RUN, {}))
        with pytest.raises(PipelineError, match="template languages"):
            RunContext(
                store=store, gateway=Gateway(),
                corpora={"en": en_corpus, "fa": fa_corpus},
                generators=(GEN,), scorer=PROBE, embedder=EMBED,
                templates={"en": TEMPLATES["en"]},
            )

    def test_level_domain(self, tmp_path, en_corpus):
        with pytest.raises(PipelineError, match="levels"):
            make_ctx(tmp_path / "a", {"en": en_corpus}, levels=(10, 15))
        with pytest.raises(PipelineError, match="levels"):
            make_ctx(tmp_path / "b", {"en": en_corpus}, levels=(10, 10))

    def test_worker_floor(self, tmp_path, en_corpus):
        with pytest.raises(PipelineError, match="workers"):
            make_ctx(tmp_path, {"en": en_corpus}, workers=0)


class TestFullRun:
    @pytest.fixture
    def small(self, en_corpus):
        return subset(en_corpus, 3, seed=7)  # q0003, q0006, q0007

    def test_row_counts(self, tmp_path, small):
        ctx = make_ctx(tmp_path, {"en": small})
        reports = run(ctx, ["aggregate"])
        by_stage = {r.stage: r for r in reports}
        assert by_stage["generate"].completed == 3
        assert by_stage["constrain"].completed == 6
        assert by_stage["mask"].completed == 9
        assert by_stage["score"].completed == 12  # 3 baseline + 9 masked
        assert by_stage["similarity"].completed == 6
        assert len(ctx.store.load_explanations()) == 9
        assert len(ctx.store.load_masks()) == 9
        assert len(ctx.store.load_scores()) == 12
        assert len(ctx.store.load_similarities()) == 6

    def test_aggregate_cells(self, tmp_path, small):
        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["aggregate"])
        cells = ctx.store.load_aggregates()
        heads = [(c.generator_model, c.level) for c in cells]
        assert heads == [("baseline", "noexp"), ("gen-1", 0), ("gen-1", 10), ("gen-1", 90)]
        for cell in cells:
            assert cell.n_items == 3
            assert cell.n_excluded == 0
        assert cells[0].mean_sufficiency == 0.25  # mock scorer ties every option

    def test_constrained_rows_within_budget(self, tmp_path, small):
        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["constrain"])
        bases = {e.item_id: e for e in ctx.store.load_explanations() if e.level == 0}
        for e in ctx.store.load_explanations():
            if e.level == 0:
                continue
            budget = max(1, (100 - e.level) * bases[e.item_id].word_count // 100)
            assert e.word_count <= budget

    def test_masked_rows_verify(self, tmp_path, small):
        from suffbench.masker import verify_masked

        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["mask"])
        for m in ctx.store.load_masks():
            assert verify_masked(m.masked_text, small[m.item_id])

    def test_run_id_stamped_everywhere(self, tmp_path, small):
        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["aggregate"])
        rows = (
            ctx.store.load_explanations() + ctx.store.load_masks()
            + ctx.store.load_scores() + ctx.store.load_similarities()
            + ctx.store.load_aggregates()
        )
        assert {r.run_id for r in rows} == {RUN}

    def test_both_languages(self, tmp_path, en_corpus, fa_corpus):
        small_en = subset(en_corpus, 2, seed=1)
        small_fa = subset(fa_corpus, 2, seed=1)
        ctx = make_ctx(tmp_path, {"en": small_en, "fa": small_fa}, levels=(50,))
        run(ctx, ["aggregate"])
        scores = ctx.store.load_scores()
        assert {s.language for s in scores} == {"en", "fa"}
        assert len(scores) == 2 * (2 + 4)  # per language: 2 baseline + 2 items x 2 levels


class TestDeterminism:
    def test_worker_count_does_not_change_bytes(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)
        ctx1 = make_ctx(tmp_path / "a", {"en": small}, workers=1)
        ctx4 = make_ctx(tmp_path / "b", {"en": small}, workers=4)
        run(ctx1, ["aggregate"])
        run(ctx4, ["aggregate"])
        assert store_bytes(tmp_path / "a" / "store") == store_bytes(tmp_path / "b" / "store")


class TestResume:
    def test_fresh_gateway_resume_makes_no_model_calls(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)
        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["aggregate"])
        before = store_bytes(tmp_path / "store")

        resumed_store = RunStore.open_resume(
            tmp_path / "store", RunManifest.new(RUN, {"levels": [10, 90]})
        )
        gateway = Gateway()
        ctx2 = make_ctx(tmp_path, {"en": small}, gateway=gateway, store=resumed_store)
        reports = run(ctx2, ["aggregate"])
        assert gateway.mock_counts() == {"generate": 0, "logprobs": 0, "embeddings": 0}
        assert store_bytes(tmp_path / "store") == before
        assert all(r.planned == 0 for r in reports if r.stage != "aggregate")

    def test_partial_resume_skips_finished_stage(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)
        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["generate"])

        resumed_store = RunStore.open_resume(
            tmp_path / "store", RunManifest.new(RUN, {"levels": [10, 90]})
        )
        ctx2 = make_ctx(tmp_path, {"en": small}, store=resumed_store)
        assert plan_generate(ctx2) == []
        reports = run(ctx2, ["score"])
        by_stage = {r.stage: r for r in reports}
        assert by_stage["generate"].planned == 0
        assert by_stage["constrain"].completed == 6
        assert by_stage["score"].completed == 12


class _SabotagedGeneration:
    """Delegates to a real gateway but returns junk for one item's
    generation prompt."""

    def __init__(self, inner, needle):
        self._inner = inner
        self._needle = needle

    def generate(self, endpoint, prompt, **kwargs):
        if prompt.kind == "generate" and self._needle in prompt.text:
            return GenerationResult(
                text="I cannot answer that.", finish_reason="stop", request_fingerprint="x",
            )
        return self._inner.generate(endpoint, prompt, **kwargs)

    def __getattr__(self, name):
        return getattr(self._inner, name)


class TestExpectedFailures:
    def test_unparseable_generation_is_audited_and_excluded(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)  # q0003, q0006, q0007
        needle = small["q0006"].stem
        gateway = _SabotagedGeneration(Gateway(), needle)
        ctx = make_ctx(tmp_path, {"en": small}, gateway=gateway)
        reports = run(ctx, ["aggregate"])
        by_stage = {r.stage: r for r in reports}
        assert by_stage["generate"].completed == 2
        assert by_stage["generate"].failed == 1

        audit = ctx.store.load_audit()
        assert len(audit) == 1
        assert audit[0].item_id == "q0006"
        assert audit[0].event in EXCLUSION_EVENTS
        assert exclusion_keys(ctx.store) == {("en", "gen-1", "q0006")}

        # excluded from every generator cell, still in the baseline
        scores = ctx.store.load_scores()
        assert len([s for s in scores if s.generator_model == "baseline"]) == 3
        assert not [s for s in scores if s.item_id == "q0006" and s.level != "noexp"]
        for cell in ctx.store.load_aggregates():
            if cell.generator_model == "gen-1":
                assert cell.n_items == 2
                assert cell.n_excluded == 1

    def test_resume_does_not_retry_audited_item(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)
        needle = small["q0006"].stem
        gateway = _SabotagedGeneration(Gateway(), needle)
        ctx = make_ctx(tmp_path, {"en": small}, gateway=gateway)
        run(ctx, ["generate"])

        resumed_store = RunStore.open_resume(
            tmp_path / "store", RunManifest.new(RUN, {"levels": [10, 90]})
        )
        ctx2 = make_ctx(tmp_path, {"en": small}, store=resumed_store)
        assert plan_generate(ctx2) == []


class _BrokenEmbeddings:
    def __init__(self, inner):
        self._inner = inner

    def embed(self, endpoint, text):
        raise RuntimeError("embedding backend exploded")

    def __getattr__(self, name):
        return getattr(self._inner, name)


class TestFatalFailures:
    def test_unexpected_error_becomes_stage_failure(self, tmp_path, en_corpus):
        small = subset(en_corpus, 2, seed=7)
        ctx = make_ctx(tmp_path, {"en": small}, gateway=_BrokenEmbeddings(Gateway()))
        run(ctx, ["constrain"])
        with pytest.raises(StageFailure, match="similarity"):
            run_stage(ctx, "similarity")


class TestDryRun:
    def test_plans_without_calls(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)
        gateway = Gateway()
        ctx = make_ctx(tmp_path, {"en": small}, gateway=gateway)
        reports = run(ctx, ["aggregate"], dry_run=True)
        by_stage = {r.stage: r for r in reports}
        assert by_stage["generate"].planned == 3
        assert by_stage["generate"].completed == 0
        # later stages see no stored rows yet, so they plan nothing
        assert by_stage["constrain"].planned == 0
        assert gateway.mock_counts() == {"generate": 0, "logprobs": 0, "embeddings": 0}
        assert len(ctx.store.load_explanations()) == 0

    def test_dry_run_after_generate_sees_constrain_work(self, tmp_path, en_corpus):
        small = subset(en_corpus, 3, seed=7)
        ctx = make_ctx(tmp_path, {"en": small})
        run(ctx, ["generate"])
        reports = run(ctx, ["constrain"], dry_run=True)
        by_stage = {r.stage: r for r in reports}
        assert by_stage["constrain"].planned == 6
