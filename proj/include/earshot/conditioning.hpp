#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "earshot/autodiff.hpp"

namespace earshot {

enum class Severity : std::uint8_t { mild = 0, moderate = 1, moderatelySevere = 2 };
inline constexpr int kSeverityClasses = 3;

std::string to_string(Severity s);
Severity severity_from_string(const std::string& s);

/// Audiogram bands in Hz, fixed order.
inline constexpr std::array<double, 8> kAudiogramHz = {250, 500, 1000, 2000,
                                                       3000, 4000, 6000, 8000};
using Audiogram = std::array<double, 8>;  // dB HL per band

struct ListenerProfile {
  std::string listener_id;
  Severity severity = Severity::mild;
  std::optional<Audiogram> audiogram_left;
  std::optional<Audiogram> audiogram_right;

  bool has_audiogram() const { return audiogram_left && audiogram_right; }
  /// Throws InputError for empty ids or thresholds outside [-10, 120] dB HL.
  void validate() const;
};

/// Mean over both ears of the thresholds at 0.5, 1, 2 and 4 kHz.
double pta4(const ListenerProfile& profile);

/// Per-band average of the two ears, all 8 bands.
Audiogram ear_averaged_bands(const ListenerProfile& profile);

/// WHO grade for a PTA4 value; nullopt outside the three graded classes.
std::optional<Severity> who_grade(double pta4_db);

/// False when an audiogram is present and its WHO grade disagrees with the label.
bool severity_consistent(const ListenerProfile& profile);

enum class ConditioningMode { categorical, pta4, pta8, none };

std::string to_string(ConditioningMode m);
ConditioningMode conditioning_mode_from_string(const std::string& s);

/// Standardisation statistics for the audiogram pathways, fitted on the
/// training listeners only.
struct ConditioningStats {
  double pta4_mean = 0.0;
  double pta4_std = 1.0;
  Audiogram pta8_mean{};
  Audiogram pta8_std{1, 1, 1, 1, 1, 1, 1, 1};

  /// Listeners without audiograms are skipped; with none, identity stats remain.
  static ConditioningStats fit(std::span<const ListenerProfile> train_listeners);
};

/// Registers only the parameters of `mode`'s pathway:
/// categorical -> cond.severity [3,D] ~ N(0, 0.02);
/// pta4 -> cond.pta4.w [1,D], cond.pta4.b [D]; pta8 -> cond.pta8.w [8,D], cond.pta8.b [D];
/// none -> nothing (the generic CLS vector is registered separately).
void register_conditioning(ParameterStore& store, ConditioningMode mode, Index d_model,
                           std::mt19937_64& rng);

/// Registers the generic CLS vector cond.cls [D] ~ N(0, 0.02).
void register_generic_cls(ParameterStore& store, Index d_model, std::mt19937_64& rng);

/// Listener token of width D for the given pathway.
Var conditioning_token(Graph& g, const ParameterStore& store, const ListenerProfile& profile,
                       ConditioningMode mode, const ConditioningStats& stats);

}  // namespace earshot
