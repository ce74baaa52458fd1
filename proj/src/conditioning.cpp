#include "earshot/conditioning.hpp"

#include <cmath>

#include "earshot/init.hpp"
#include "earshot/ops.hpp"

namespace earshot {

namespace {

constexpr std::array<std::size_t, 4> kPta4Bands = {1, 2, 3, 5};  // 0.5, 1, 2, 4 kHz

void require_audiogram(const ListenerProfile& p) {
  if (!p.has_audiogram()) {
    throw InputError("listener '" + p.listener_id + "' has no audiogram");
  }
}

}  // namespace

std::string to_string(Severity s) {
  switch (s) {
    case Severity::mild: return "mild";
    case Severity::moderate: return "moderate";
    case Severity::moderatelySevere: return "moderatelySevere";
  }
  return "unknown";
}

Severity severity_from_string(const std::string& s) {
  if (s == "mild") return Severity::mild;
  if (s == "moderate") return Severity::moderate;
  if (s == "moderatelySevere") return Severity::moderatelySevere;
  throw InputError("unknown severity '" + s + "'");
}

void ListenerProfile::validate() const {
  if (listener_id.empty()) throw InputError("listener id is empty");
  for (const auto* ag : {&audiogram_left, &audiogram_right}) {
    if (!ag->has_value()) continue;
    for (double v : **ag) {
      if (!(v >= -10.0 && v <= 120.0)) {
        throw InputError("listener '" + listener_id + "': threshold " + std::to_string(v) +
                         " dB HL outside [-10, 120]");
      }
    }
  }
}

double pta4(const ListenerProfile& profile) {
  require_audiogram(profile);
  double left = 0, right = 0;
  for (std::size_t b : kPta4Bands) {
    left += (*profile.audiogram_left)[b];
    right += (*profile.audiogram_right)[b];
  }
  return 0.5 * (left / 4.0 + right / 4.0);
}

Audiogram ear_averaged_bands(const ListenerProfile& profile) {
  require_audiogram(profile);
  Audiogram out{};
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b] = 0.5 * ((*profile.audiogram_left)[b] + (*profile.audiogram_right)[b]);
  }
  return out;
}

std::optional<Severity> who_grade(double pta4_db) {
  if (pta4_db >= 20.0 && pta4_db < 35.0) return Severity::mild;
  if (pta4_db >= 35.0 && pta4_db < 50.0) return Severity::moderate;
  if (pta4_db >= 50.0 && pta4_db < 65.0) return Severity::moderatelySevere;
  return std::nullopt;
}

bool severity_consistent(const ListenerProfile& profile) {
  if (!profile.has_audiogram()) return true;
  const auto grade = who_grade(pta4(profile));
  return grade && *grade == profile.severity;
}

std::string to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::categorical: return "categorical";
    case ConditioningMode::pta4: return "pta4";
    case ConditioningMode::pta8: return "pta8";
    case ConditioningMode::none: return "none";
  }
  return "unknown";
}

ConditioningMode conditioning_mode_from_string(const std::string& s) {
  if (s == "categorical") return ConditioningMode::categorical;
  if (s == "pta4") return ConditioningMode::pta4;
  if (s == "pta8") return ConditioningMode::pta8;
  if (s == "none") return ConditioningMode::none;
  throw ConfigError("unknown conditioning mode '" + s + "'");
}

ConditioningStats ConditioningStats::fit(std::span<const ListenerProfile> train_listeners) {
  ConditioningStats stats;
  std::vector<double> p4;
  std::vector<Audiogram> p8;
  for (const auto& l : train_listeners) {
    if (!l.has_audiogram()) continue;
    p4.push_back(pta4(l));
    p8.push_back(ear_averaged_bands(l));
  }
  if (p4.empty()) return stats;
  const auto n = static_cast<double>(p4.size());
  auto mean_sd = [n](auto values) {
    double m = 0;
    for (double v : values) m += v;
    m /= n;
    double var = 0;
    for (double v : values) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / n);
    return std::pair{m, sd > 1e-8 ? sd : 1.0};
  };
  std::tie(stats.pta4_mean, stats.pta4_std) = mean_sd(p4);
  for (std::size_t b = 0; b < 8; ++b) {
    std::vector<double> col;
    for (const auto& a : p8) col.push_back(a[b]);
    std::tie(stats.pta8_mean[b], stats.pta8_std[b]) = mean_sd(col);
  }
  return stats;
}

void register_conditioning(ParameterStore& store, ConditioningMode mode, Index d_model,
                           std::mt19937_64& rng) {
  switch (mode) {
    case ConditioningMode::categorical:
      store.add("cond.severity", normal_init({kSeverityClasses, d_model}, 0.02, rng));
      break;
    case ConditioningMode::pta4:
      store.add("cond.pta4.w", uniform_fan_in({1, d_model}, 1, rng));
      store.add("cond.pta4.b", uniform_fan_in({d_model}, 1, rng));
      break;
    case ConditioningMode::pta8:
      store.add("cond.pta8.w", uniform_fan_in({8, d_model}, 8, rng));
      store.add("cond.pta8.b", uniform_fan_in({d_model}, 8, rng));
      break;
    case ConditioningMode::none:
      break;
  }
}

void register_generic_cls(ParameterStore& store, Index d_model, std::mt19937_64& rng) {
  store.add("cond.cls", normal_init({d_model}, 0.02, rng));
}

Var conditioning_token(Graph& g, const ParameterStore& store, const ListenerProfile& profile,
                       ConditioningMode mode, const ConditioningStats& stats) {
  switch (mode) {
    case ConditioningMode::categorical:
      return row(g.param(store, "cond.severity"), static_cast<Index>(profile.severity));
    case ConditioningMode::pta4: {
      const double z = (pta4(profile) - stats.pta4_mean) / stats.pta4_std;
      return linear(g.constant(Tensor::from({1}, {z})), g.param(store, "cond.pta4.w"),
                    g.param(store, "cond.pta4.b"));
    }
    case ConditioningMode::pta8: {
      const auto bands = ear_averaged_bands(profile);
      Tensor x({8});
      for (std::size_t b = 0; b < 8; ++b) {
        x[static_cast<Index>(b)] = (bands[b] - stats.pta8_mean[b]) / stats.pta8_std[b];
      }
      return linear(g.constant(std::move(x)), g.param(store, "cond.pta8.w"),
                    g.param(store, "cond.pta8.b"));
    }
    case ConditioningMode::none:
      return g.param(store, "cond.cls");
  }
  throw ConfigError("unhandled conditioning mode");
}

}  // namespace earshot
