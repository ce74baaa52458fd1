#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "earshot/conditioning.hpp"
#include "earshot/ops.hpp"

using namespace earshot;

namespace {

ListenerProfile flat(const std::string& id, Severity s, double db) {
  Audiogram a;
  a.fill(db);
  return {id, s, a, a};
}

}  // namespace

TEST_CASE("pta4 examples") {
  CHECK(pta4(flat("a", Severity::moderate, 40.0)) == 40.0);

  ListenerProfile p{"b", Severity::mild, Audiogram{}, Audiogram{}};
  p.audiogram_left->fill(0.0);
  p.audiogram_right->fill(0.0);
  for (std::size_t band : {1u, 2u, 3u, 5u}) {
    (*p.audiogram_left)[band] = 20.0;
    (*p.audiogram_right)[band] = 40.0;
  }
  // Bands outside the four must not contribute.
  (*p.audiogram_left)[0] = 110.0;
  (*p.audiogram_right)[7] = 110.0;
  CHECK(pta4(p) == 30.0);

  ListenerProfile missing{"c", Severity::mild, std::nullopt, std::nullopt};
  CHECK_THROWS_AS(pta4(missing), InputError);
}

TEST_CASE("WHO grading") {
  CHECK(who_grade(20.0) == Severity::mild);
  CHECK(who_grade(34.9) == Severity::mild);
  CHECK(who_grade(35.0) == Severity::moderate);
  CHECK(who_grade(49.9) == Severity::moderate);
  CHECK(who_grade(50.0) == Severity::moderatelySevere);
  CHECK(who_grade(64.9) == Severity::moderatelySevere);
  CHECK_FALSE(who_grade(19.9).has_value());
  CHECK_FALSE(who_grade(65.0).has_value());
  CHECK(severity_consistent(flat("a", Severity::moderate, 40.0)));
  CHECK_FALSE(severity_consistent(flat("a", Severity::mild, 40.0)));
}

TEST_CASE("profile validation") {
  CHECK_THROWS_AS(flat("a", Severity::mild, 121.0).validate(), InputError);
  CHECK_THROWS_AS(flat("a", Severity::mild, -10.5).validate(), InputError);
  CHECK_THROWS_AS(flat("", Severity::mild, 30.0).validate(), InputError);
  CHECK_NOTHROW(flat("a", Severity::mild, -10.0).validate());
}

TEST_CASE("string forms") {
  for (auto s : {Severity::mild, Severity::moderate, Severity::moderatelySevere})
    CHECK(severity_from_string(to_string(s)) == s);
  for (auto m : {ConditioningMode::categorical, ConditioningMode::pta4, ConditioningMode::pta8,
                 ConditioningMode::none})
    CHECK(conditioning_mode_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(conditioning_mode_from_string("bogus"), ConfigError);
}

TEST_CASE("pathway registration") {
  std::mt19937_64 rng(1);
  ParameterStore cat, p4, p8, none;
  register_conditioning(cat, ConditioningMode::categorical, 16, rng);
  register_conditioning(p4, ConditioningMode::pta4, 16, rng);
  register_conditioning(p8, ConditioningMode::pta8, 16, rng);
  register_conditioning(none, ConditioningMode::none, 16, rng);
  CHECK(cat.size() == 1);
  CHECK(cat.at("cond.severity").value.shape() == Shape{3, 16});
  CHECK(p4.parameter_count() == 32);
  CHECK(p8.at("cond.pta8.w").value.shape() == Shape{8, 16});
  CHECK(none.size() == 0);
}

TEST_CASE("categorical token is an exact embedding row") {
  std::mt19937_64 rng(2);
  ParameterStore store;
  register_conditioning(store, ConditioningMode::categorical, 8, rng);
  const ConditioningStats stats;
  Graph g;
  const auto a = flat("x", Severity::moderate, 40.0);
  const auto b = flat("y", Severity::moderate, 45.0);
  auto ta = conditioning_token(g, store, a, ConditioningMode::categorical, stats);
  auto tb = conditioning_token(g, store, b, ConditioningMode::categorical, stats);
  CHECK(ta.value() == tb.value());
  CHECK(ta.value().data() == store.at("cond.severity").value.matrix().row(1).transpose());
}

TEST_CASE("pta4 token is affine in the pta4 value") {
  std::mt19937_64 rng(3);
  ParameterStore store;
  register_conditioning(store, ConditioningMode::pta4, 8, rng);
  std::vector<ListenerProfile> train = {flat("a", Severity::mild, 25), flat("b", Severity::moderate, 40),
                                        flat("c", Severity::moderatelySevere, 55)};
  const auto stats = ConditioningStats::fit(train);
  Graph g;
  auto tok = [&](double db) {
    return conditioning_token(g, store, flat("q", Severity::mild, db), ConditioningMode::pta4, stats)
        .value()
        .data();
  };
  const double a = 22.0, c = 61.0;
  CHECK((tok(a) + tok(c) - 2.0 * tok(0.5 * (a + c))).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pta8 token uses ear-averaged standardised bands") {
  std::mt19937_64 rng(4);
  ParameterStore store;
  register_conditioning(store, ConditioningMode::pta8, 4, rng);
  std::vector<ListenerProfile> train = {flat("a", Severity::mild, 20), flat("b", Severity::mild, 40)};
  const auto stats = ConditioningStats::fit(train);
  CHECK(stats.pta8_mean[3] == 30.0);
  CHECK(stats.pta8_std[3] == 10.0);

  ListenerProfile p = flat("q", Severity::mild, 0.0);
  for (std::size_t b = 0; b < 8; ++b) {
    (*p.audiogram_left)[b] = 10.0 * static_cast<double>(b);
    (*p.audiogram_right)[b] = 10.0 * static_cast<double>(b) + 20.0;
  }
  Graph g;
  auto t = conditioning_token(g, store, p, ConditioningMode::pta8, stats);
  Eigen::RowVectorXd z(8);
  for (Index b = 0; b < 8; ++b) z[b] = (10.0 * static_cast<double>(b) + 10.0 - 30.0) / 10.0;
  const Eigen::RowVectorXd expect = z * store.at("cond.pta8.w").value.matrix() +
                                    store.at("cond.pta8.b").value.matrix();
  CHECK((t.value().matrix() - expect).cwiseAbs().maxCoeff() < 1e-12);

  ListenerProfile no_audio{"n", Severity::mild, std::nullopt, std::nullopt};
  CHECK_THROWS_AS(conditioning_token(g, store, no_audio, ConditioningMode::pta8, stats), InputError);
}

TEST_CASE("none mode token ignores the profile") {
  std::mt19937_64 rng(5);
  ParameterStore store;
  register_generic_cls(store, 8, rng);
  const ConditioningStats stats;
  Graph g;
  auto a = conditioning_token(g, store, flat("a", Severity::mild, 25), ConditioningMode::none, stats);
  auto b = conditioning_token(g, store, flat("b", Severity::moderatelySevere, 60),
                              ConditioningMode::none, stats);
  CHECK(a.value() == b.value());
}

TEST_CASE("stats come from the given listeners only and are deterministic") {
  std::vector<ListenerProfile> train = {flat("a", Severity::mild, 30), flat("b", Severity::moderate, 40)};
  const auto s1 = ConditioningStats::fit(train);
  const auto s2 = ConditioningStats::fit(train);
  CHECK(s1.pta4_mean == 35.0);
  CHECK(s1.pta4_std == 5.0);
  CHECK(s1.pta4_mean == s2.pta4_mean);
  CHECK(s1.pta8_std == s2.pta8_std);

  std::vector<ListenerProfile> same = {flat("a", Severity::mild, 30), flat("b", Severity::mild, 30)};
  CHECK(ConditioningStats::fit(same).pta4_std == 1.0);
}
