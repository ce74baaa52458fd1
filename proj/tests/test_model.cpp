#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "earshot/grad_check.hpp"
#include "model_fixtures.hpp"

using namespace earshot;
using namespace earshot::testing;

namespace {

ParameterStore model_store(const ModelConfig& cfg, std::uint64_t seed = 1) {
  ParameterStore store;
  std::mt19937_64 rng(seed);
  register_model(store, cfg, rng);
  return store;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  return (a.data() - b.data()).cwiseAbs().maxCoeff();
}

StreamInput swap_free_copy(const StreamInput& s) { return s; }

}  // namespace

TEST_CASE("config text round trip and validation") {
  ModelConfig cfg = tiny_config(4);
  cfg.backbones = {Backbone::canaryLike, Backbone::parakeetLike};
  cfg.layer_windows = {{10, 16}, {12, 15}};
  cfg.readout = Readout::clsPool;
  cfg.conditioning = ConditioningMode::pta8;
  cfg.ear_pooling = EarPooling::averageEarFeature;
  cfg.beta = 3.5;
  cfg.use_reference = false;
  cfg.logmel_norm = true;
  const ModelConfig back = parse_model_config(format_model_config(cfg));
  CHECK(format_model_config(back) == format_model_config(cfg));
  CHECK(back.total_layers() == 11);

  CHECK_THROWS_AS(parse_model_config("d_model = 30\nn_heads = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("readout = A\nconditioning = none\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("beta = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("ref_time_window = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("mscnn_channels = 10\n"), ConfigError);
  CHECK_THROWS_AS(parse_model_config("bogus = 1\n"), ConfigError);
  CHECK(parse_model_config("# comment\nreadout = B  # mean\n").readout == Readout::meanPool);
}

TEST_CASE("mscnn keeps the time length") {
  const auto cfg = tiny_config();
  const auto store = model_store(cfg);
  std::mt19937_64 rng(2);
  for (Index t : {1, 9, 100}) {
    Graph g;
    auto y = mscnn(g, store, g.constant(random_tensor({t, kMelBands}, rng)), cfg);
    CHECK(y.shape() == Shape{t, cfg.d_model});
  }
}

TEST_CASE("mscnn maps zero input to zero with zero biases") {
  const auto cfg = tiny_config();
  auto store = model_store(cfg);
  for (auto& e : store.entries()) {
    if (e.name.rfind("mscnn.", 0) == 0 && e.name.back() == 'b') e.value.set_zero();
  }
  Graph g;
  auto y = mscnn(g, store, g.constant(Tensor({5, kMelBands})), cfg);
  CHECK(y.value().data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mscnn passes grad_check") {
  auto cfg = tiny_config();
  cfg.mscnn_channels = 6;
  ParameterStore store;
  std::mt19937_64 rng(3);
  register_model(store, cfg, rng);
  const Tensor mel = random_tensor({12, kMelBands}, rng);
  const Tensor w = random_tensor({12, cfg.d_model}, rng);
  GradCheckOptions opts;
  opts.max_coords_per_param = 20;
  const std::function<Var(Graph&)> f = [&](Graph& g) {
    return sum(mul(mscnn(g, store, g.constant(mel), cfg), g.constant(w)));
  };
  CHECK(grad_check<double>(store, f, opts) < 1e-4);
}

TEST_CASE("fusion: masked tail frames are inert and gradients reach both inputs") {
  const auto cfg = tiny_config();
  auto store = model_store(cfg);
  std::mt19937_64 rng(4);
  const Tensor sfm = random_tensor({2, kSfmDim}, rng);
  Tensor feats = random_tensor({13, cfg.d_model}, rng);
  Mask valid(13, 1);
  for (std::size_t i = 10; i < 13; ++i) valid[i] = 0;
  auto run = [&](const Tensor& f) {
    Graph g;
    return fuse_sfm_mscnn(g, store, g.constant(sfm), g.constant(f), valid, cfg).value();
  };
  const Tensor before = run(feats);
  feats.matrix().bottomRows(3).setConstant(77.0);
  CHECK(max_abs_diff(before, run(feats)) <= 1e-12);

  Graph g;
  auto bad = g.constant(random_tensor({3, kSfmDim}, rng));
  CHECK_THROWS_AS(fuse_sfm_mscnn(g, store, bad, g.constant(feats), valid, cfg), DimensionError);

  // Gradient of the fused stream reaches the SFM projection and the MSCNN.
  std::mt19937_64 rng2(5);
  const auto bundle = random_bundle(rng2, 2, 16);
  const auto in = prepare_input(bundle, cfg);
  store.zero_grad();
  Graph g2;
  auto fused = fuse_stream(g2, store, in.left, cfg);
  g2.backward(sum(square(concat(std::span<const Var>(fused), 0))));
  g2.accumulate_into(store);
  CHECK(store.at("sfm_proj.w").grad.data().cwiseAbs().maxCoeff() > 0);
  CHECK(store.at("mscnn.b2.w").grad.data().cwiseAbs().maxCoeff() > 0);
  CHECK(store.at("mscnn.out.w").grad.data().cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("parameter count does not depend on layers or streams") {
  const Index base = model_store(tiny_config(1)).parameter_count();
  for (Index layers : {2, 4, 7}) {
    CHECK(model_store(tiny_config(layers)).parameter_count() == base);
  }
  auto two = tiny_config(4);
  two.backbones = {Backbone::canaryLike, Backbone::parakeetLike};
  two.layer_windows = {{10, 16}, {10, 16}};
  CHECK(model_store(two).parameter_count() == base);

  // Conditioning tables are the only part that varies with the pathway.
  Index backbone = -1;
  for (auto mode : {ConditioningMode::categorical, ConditioningMode::pta4, ConditioningMode::pta8}) {
    auto c = tiny_config(3);
    c.conditioning = mode;
    const Index n = backbone_parameter_count(model_store(c));
    if (backbone < 0) backbone = n;
    CHECK(n == backbone);
  }

  auto no_ref = tiny_config(2);
  no_ref.use_reference = false;
  const Index block = cross_attention_block_parameter_count(no_ref.attention());
  CHECK(model_store(no_ref).parameter_count() == base - 2 * block);
}

TEST_CASE("no-reference model does strictly less work") {
  std::mt19937_64 rng(6);
  const auto bundle = random_bundle(rng, 2, 16);
  auto with = tiny_config(2);
  auto without = with;
  without.use_reference = false;
  auto flops = [&](const ModelConfig& cfg) {
    Predictor p(cfg, 1);
    Graph g;
    p.forward(g, prepare_input(bundle, cfg), listener());
    return g.flops();
  };
  CHECK(flops(without) < flops(with));
}

TEST_CASE("temporal stage without reference is the masked mean of encoded tokens") {
  auto cfg = tiny_config(3);
  cfg.use_reference = false;
  const auto store = model_store(cfg);
  std::mt19937_64 rng(7);
  const auto in = prepare_input(random_bundle(rng, 3, 20, 11), cfg);
  CHECK(in.left.token_valid == Mask{1, 1, 0});
  Graph g;
  const auto fused = fuse_stream(g, store, in.left, cfg);
  const auto enc = temporal_encode(g, store, fused, in.left.token_valid, cfg);
  const Var sums = temporal_summarize(g, store, enc, nullptr, cfg);
  REQUIRE(sums.shape() == Shape{3, cfg.d_model});
  for (Index l = 0; l < 3; ++l) {
    const auto& tok = enc.layers[static_cast<std::size_t>(l)].value().matrix();
    const Eigen::RowVectorXd mean = 0.5 * (tok.row(0) + tok.row(1));
    CHECK((sums.value().matrix().row(l) - mean).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("single-token utterance flows through the temporal stage") {
  const auto cfg = tiny_config(2);
  const auto store = model_store(cfg);
  std::mt19937_64 rng(8);
  const auto in = prepare_input(random_bundle(rng, 2, 5), cfg);
  CHECK(in.left.sfm.extent(1) == 1);
  Graph g;
  const auto ref = temporal_encode(g, store, fuse_stream(g, store, *in.reference, cfg),
                                   in.reference->token_valid, cfg);
  const auto ear = temporal_encode(g, store, fuse_stream(g, store, in.left, cfg),
                                   in.left.token_valid, cfg);
  CHECK(temporal_summarize(g, store, ear, &ref, cfg).shape() == Shape{2, cfg.d_model});
}

TEST_CASE("layer stage readouts") {
  std::mt19937_64 rng(9);
  for (Index layers : {1, 3}) {
    auto cfg = tiny_config(layers);
    cfg.readout = Readout::meanPool;
    const auto store = model_store(cfg);
    Graph g;
    auto l = g.constant(random_tensor({layers, cfg.d_model}, rng));
    auto r = g.constant(random_tensor({layers, cfg.d_model}, rng));
    auto ref = g.constant(random_tensor({layers, cfg.d_model}, rng));
    const ListenerProfile who = listener();
    const auto tok = conditioning_token(g, store, who, cfg.conditioning, {});
    const auto out = layer_stage(g, store, l, r, ref, tok, cfg);
    CHECK(out.left.extent(0) == layers + 1);
    const Eigen::RowVectorXd mean = out.left.value().matrix().topRows(layers).colwise().mean();
    CHECK((out.readout_left.value().matrix() - mean).cwiseAbs().maxCoeff() <= 1e-12);
    if (layers == 1) CHECK(out.readout_left.value().data() == out.left.value().matrix().row(0).transpose());

    // Ear symmetry: swapping the inputs swaps the readouts exactly.
    const auto swapped = layer_stage(g, store, r, l, ref, tok, cfg);
    CHECK(swapped.readout_left.value() == out.readout_right.value());
    CHECK(swapped.readout_right.value() == out.readout_left.value());
  }

  for (auto readout : {Readout::severityToken, Readout::clsPool}) {
    auto cfg = tiny_config(2);
    cfg.readout = readout;
    const auto store = model_store(cfg);
    Graph g;
    auto x = g.constant(random_tensor({2, cfg.d_model}, rng));
    const auto tok = conditioning_token(g, store, listener(), cfg.conditioning, {});
    const auto out = layer_stage(g, store, x, x, std::nullopt, tok, cfg);
    const Index pos = readout == Readout::severityToken ? 2 : out.left.extent(0) - 1;
    CHECK(out.left.extent(0) == (readout == Readout::clsPool ? 4 : 3));
    CHECK(out.readout_left.value().data() == out.left.value().matrix().row(pos).transpose());
  }
}

TEST_CASE("score head") {
  const auto cfg = tiny_config();
  auto store = model_store(cfg);
  std::mt19937_64 rng(10);
  {
    ParameterStore zero = store;
    for (auto& e : zero.entries()) {
      if (e.name.rfind("head.", 0) == 0) e.value.set_zero();
    }
    Graph g;
    CHECK(score_head(g, zero, g.constant(random_tensor({cfg.d_model}, rng))).value().item() == 50.0);
  }
  for (int i = 0; i < 200; ++i) {
    Graph g;
    const double s =
        score_head(g, store, g.constant(random_tensor({cfg.d_model}, rng, -50, 50))).value().item();
    CHECK(s > 0.0);
    CHECK(s < 100.0);
  }
  const Tensor x = random_tensor({cfg.d_model}, rng);
  const std::function<Var(Graph&)> f = [&](Graph& g) { return score_head(g, store, g.constant(x)); };
  GradCheckOptions opts;
  opts.max_coords_per_param = 40;
  CHECK(grad_check<double>(store, f, opts) < 1e-4);
}

TEST_CASE("best-ear pooling values") {
  CHECK(best_ear_pool(37.25, 37.25, 6.0) == 37.25);
  CHECK(std::abs(best_ear_pool(30.0, 20.0, 6.0) - 29.88448) < 1e-5);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    const double p = best_ear_pool(a, b, 6.0);
    CHECK(p <= std::max(a, b));
    CHECK(p >= std::max(a, b) - std::log(2.0) / 6.0);
    CHECK(p == best_ear_pool(b, a, 6.0));
  }
}

TEST_CASE("average-ear pooling") {
  auto cfg = tiny_config();
  cfg.ear_pooling = EarPooling::averageEarFeature;
  const auto store = model_store(cfg);
  std::mt19937_64 rng(12);
  Graph g;
  auto a = g.constant(random_tensor({cfg.d_model}, rng));
  auto b = g.constant(random_tensor({cfg.d_model}, rng));
  CHECK(average_ear_pool(g, store, a, a).value() == score_head(g, store, a).value());
  CHECK(average_ear_pool(g, store, a, b).value() == average_ear_pool(g, store, b, a).value());
  const double best =
      best_ear_pool(score_head(g, store, a), score_head(g, store, b), 6.0).value().item();
  CHECK(average_ear_pool(g, store, a, b).value().item() != best);
}

TEST_CASE("forward smoke on the tiny config") {
  std::mt19937_64 rng(13);
  const auto bundle = random_bundle(rng, 2, 16);
  for (auto readout : {Readout::severityToken, Readout::meanPool, Readout::clsPool}) {
    for (auto pooling : {EarPooling::bestEarLSE, EarPooling::averageEarFeature}) {
      auto cfg = tiny_config(2);
      cfg.readout = readout;
      cfg.ear_pooling = pooling;
      Predictor p(cfg, 3);
      const auto pred = p.predict(prepare_input(bundle, cfg), listener());
      CHECK(std::isfinite(pred.pooled));
      CHECK(pred.left > 0);
      CHECK(pred.left < 100);
      CHECK(pred.pooled >= 0);
      CHECK(pred.pooled <= 100);
    }
  }
}

TEST_CASE("swapping ear inputs swaps ear scores") {
  std::mt19937_64 rng(14);
  const auto bundle = random_bundle(rng, 3, 24, 19);
  for (auto pooling : {EarPooling::bestEarLSE, EarPooling::averageEarFeature}) {
    auto cfg = tiny_config(3);
    cfg.ear_pooling = pooling;
    Predictor p(cfg, 4);
    const auto in = prepare_input(bundle, cfg);
    ModelInput swapped = in;
    swapped.left = swap_free_copy(in.right);
    swapped.right = swap_free_copy(in.left);
    const auto a = p.predict(in, listener());
    const auto b = p.predict(swapped, listener());
    CHECK(a.left == b.right);
    CHECK(a.right == b.left);
    CHECK(a.pooled == b.pooled);
  }
}

TEST_CASE("frames past valid_frames are inert end to end") {
  std::mt19937_64 rng(15);
  FeatureBundle bundle = random_bundle(rng, 2, 21, 13);
  const auto cfg = tiny_config(2);
  Predictor p(cfg, 5);
  const auto before = p.predict(prepare_input(bundle, cfg), listener());
  for (auto* s : {&bundle.left, &bundle.right, &*bundle.reference}) {
    s->mel.frames.matrix().bottomRows(8).setConstant(9.0);
    for (Index l = 0; l < 2; ++l)
      for (Index t = 13; t < 21; ++t)
        for (Index d = 0; d < kSfmDim; ++d) s->sfm[0].layers[(l * 21 + t) * kSfmDim + d] = -4.0;
  }
  const auto after = p.predict(prepare_input(bundle, cfg), listener());
  CHECK(std::abs(after.pooled - before.pooled) <= 1e-12);
  CHECK(std::abs(after.left - before.left) <= 1e-12);
}

TEST_CASE("pooled bundles give the same input as raw bundles") {
  std::mt19937_64 rng(16);
  const auto raw = random_bundle(rng, 4, 19, 15);
  auto cfg = tiny_config(2);
  cfg.layer_windows = {{1, 2}};
  const auto a = prepare_input(raw, cfg);
  const auto b = prepare_input(pool_bundle(raw), cfg);
  CHECK(a.left.sfm == b.left.sfm);
  CHECK(a.reference->token_valid == b.reference->token_valid);
  CHECK(a.right.mel == b.right.mel);
}

TEST_CASE("input errors carry the stage or stream name") {
  std::mt19937_64 rng(17);
  auto bundle = random_bundle(rng, 2, 16);
  const auto cfg = tiny_config(2);
  bundle.reference.reset();
  CHECK_THROWS_AS(prepare_input(bundle, cfg), InputError);

  Predictor p(cfg, 6);
  auto in = prepare_input(random_bundle(rng, 2, 16), cfg);
  ListenerProfile no_audio{"x", Severity::mild, std::nullopt, std::nullopt};
  auto pcfg = cfg;
  pcfg.conditioning = ConditioningMode::pta4;
  Predictor p4(pcfg, 6);
  try {
    p4.predict(in, no_audio);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).rfind("conditioning: ", 0) == 0);
  }
  in.left.sfm = Tensor({2, 3, kSfmDim});
  try {
    p.predict(in, listener());
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).rfind("fusion: ", 0) == 0);
  }
}

TEST_CASE("full model passes grad_check") {
  std::mt19937_64 rng(18);
  const auto bundle = random_bundle(rng, 2, 16, 12);
  for (auto readout : {Readout::severityToken, Readout::clsPool}) {
    auto cfg = tiny_config(2);
    cfg.readout = readout;
    cfg.conditioning = readout == Readout::clsPool ? ConditioningMode::pta4
                                                   : ConditioningMode::categorical;
    Predictor p(cfg, 7);
    const auto in = prepare_input(bundle, cfg);
    const std::function<Var(Graph&)> f = [&](Graph& g) {
      return p.forward(g, in, listener()).pooled;
    };
    GradCheckOptions opts;
    opts.max_coords_per_param = 3;
    CHECK(grad_check<double>(p.parameters(), f, opts) < 1e-3);
  }
}
