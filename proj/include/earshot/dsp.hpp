#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "earshot/tensor.hpp"

namespace earshot {

/// Hidden width shared by all supported encoders.
inline constexpr Index kSfmDim = 1024;
inline constexpr Index kMelBands = 128;
inline constexpr Index kPoolFactor = 8;

enum class Backbone : std::uint8_t { canaryLike = 0, parakeetLike = 1, synthetic = 2 };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct LogMel {
  Tensor frames;  // [T, 128], natural-log energies
  double frame_rate = 100.0;

  Index num_frames() const { return frames.extent(0); }
};

/// Hidden states of one encoder for one signal.
struct SfmStack {
  Backbone backbone = Backbone::synthetic;
  Tensor layers;  // [L, T, 1024]
  std::vector<int> layer_indices;  // original 0-based encoder indices

  Index num_layers() const { return layers.extent(0); }
  Index num_frames() const { return layers.extent(1); }
  /// Copies layer `i` (position in this stack, not encoder index) as [T, 1024].
  Tensor layer(Index i) const;
  void validate() const;
};

/// Inclusive window of encoder layer indices.
struct LayerWindow {
  int lo = 10;
  int hi = 16;

  int size() const { return hi - lo + 1; }
  friend bool operator==(const LayerWindow&, const LayerWindow&) = default;
};

/// "lo-hi" with 0-based indices; parse_layer_window accepts the same form.
std::string format_layer_window(const LayerWindow& w);
LayerWindow parse_layer_window(const std::string& s);
/// Human-facing layer label (1-based, as plotted on sweep axes).
std::string layer_label(int index);

struct StreamFeatures {
  std::vector<SfmStack> sfm;  // one per backbone
  LogMel mel;
  Index valid_frames = 0;  // frames of `mel` (and raw SFM time axis) that carry signal
  bool sfm_pooled = false;  // stacks already hold ceil(T/8) pooled tokens
};

struct FeatureBundle {
  std::string utterance_id;
  StreamFeatures left;
  StreamFeatures right;
  std::optional<StreamFeatures> reference;  // absent only for no-reference runs
};

struct LogMelOptions {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  Index n_mels = kMelBands;
  double floor = 1e-10;
  /// FFT length; 0 picks the next power of two >= max(window, sample_rate / 8).
  Index n_fft = 0;
};

/// Triangular HTK-mel filters, [n_mels, n_fft_bins], spanning 0 to Nyquist.
/// Unnormalised triangles: interior bin columns sum to one.
Tensor mel_filterbank(Index n_fft_bins, Index n_mels, double sample_rate);

/// Centre frequency (Hz) of each filter produced by mel_filterbank.
std::vector<double> mel_center_frequencies(Index n_mels, double sample_rate);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Hann-windowed STFT power spectrum projected on the mel filterbank,
/// ln(max(energy, floor)). T = floor((N - window) / hop) + 1.
LogMel log_mel(std::span<const double> samples, double sample_rate,
               const LogMelOptions& opts = {});

/// Linear-interpolation resampler.
std::vector<double> resample_linear(std::span<const double> samples, double from_rate,
                                    double to_rate);

/// Averages non-overlapping runs of 8 frames; a trailing partial run is
/// averaged over its own length, so T' = ceil(T / 8).
SfmStack temporal_pool_x8(const SfmStack& stack);

/// Keeps layers whose encoder index lies in the inclusive window.
SfmStack select_layers(const SfmStack& stack, const LayerWindow& window);

/// Per-band zero-mean / unit-variance over the valid frames of a log-Mel matrix.
Tensor normalize_log_mel(const Tensor& frames, Index valid_frames);

void write_sfm_file(const std::filesystem::path& path, const SfmStack& stack);
SfmStack read_sfm_file(const std::filesystem::path& path);
void write_log_mel_file(const std::filesystem::path& path, const LogMel& mel);
LogMel read_log_mel_file(const std::filesystem::path& path);

/// File locations of one stream.
struct StreamPaths {
  std::vector<std::filesystem::path> sfm;
  std::filesystem::path mel;
};

/// Reads one side of a bundle; valid_frames is the log-Mel length.
StreamFeatures read_stream(const StreamPaths& paths);
void write_stream(const StreamPaths& paths, const StreamFeatures& stream);

}  // namespace earshot
