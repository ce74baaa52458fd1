#include "earshot/dsp.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "binary_io.hpp"

namespace earshot {

namespace {

constexpr std::uint32_t kFeatureVersion = 1;

Index next_pow2(Index n) {
  Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::canaryLike: return "canaryLike";
    case Backbone::parakeetLike: return "parakeetLike";
    case Backbone::synthetic: return "synthetic";
  }
  return "unknown";
}

Backbone backbone_from_string(const std::string& s) {
  if (s == "canaryLike") return Backbone::canaryLike;
  if (s == "parakeetLike") return Backbone::parakeetLike;
  if (s == "synthetic") return Backbone::synthetic;
  throw ConfigError("unknown backbone '" + s + "'");
}

Tensor SfmStack::layer(Index i) const {
  const Index t = num_frames(), d = layers.extent(2);
  Tensor out({t, d});
  std::copy(layers.raw() + i * t * d, layers.raw() + (i + 1) * t * d, out.raw());
  return out;
}

void SfmStack::validate() const {
  if (layers.rank() != 3) {
    throw DimensionError("SFM stack must be [L,T,D], got " + shape_string(layers.shape()));
  }
  if (layers.extent(2) != kSfmDim) {
    throw DimensionError("SFM hidden width must be 1024, got " +
                         std::to_string(layers.extent(2)));
  }
  if (static_cast<Index>(layer_indices.size()) != layers.extent(0)) {
    throw DimensionError("SFM stack has " + std::to_string(layers.extent(0)) +
                         " layers but " + std::to_string(layer_indices.size()) + " indices");
  }
  for (std::size_t i = 1; i < layer_indices.size(); ++i) {
    if (layer_indices[i] <= layer_indices[i - 1]) {
      throw InputError("SFM layer indices must be strictly increasing");
    }
  }
}

std::string format_layer_window(const LayerWindow& w) {
  return std::to_string(w.lo) + "-" + std::to_string(w.hi);
}

LayerWindow parse_layer_window(const std::string& s) {
  const auto dash = s.find('-');
  try {
    if (dash == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    LayerWindow w{std::stoi(s.substr(0, dash)), std::stoi(s.substr(dash + 1))};
    if (w.lo < 0 || w.hi < w.lo) throw ConfigError("invalid layer window '" + s + "'");
    return w;
  } catch (const std::logic_error&) {
    throw ConfigError("invalid layer window '" + s + "'");
  }
}

std::string layer_label(int index) { return "L" + std::to_string(index + 1); }

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_center_frequencies(Index n_mels, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> centers(static_cast<std::size_t>(n_mels));
  for (Index m = 0; m < n_mels; ++m) {
    centers[static_cast<std::size_t>(m)] =
        mel_to_hz(top * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1));
  }
  return centers;
}

Tensor mel_filterbank(Index n_fft_bins, Index n_mels, double sample_rate) {
  if (n_mels < 1 || n_mels >= n_fft_bins) {
    throw ConfigError("mel_filterbank: need 1 <= n_mels < n_fft_bins");
  }
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(n_mels + 2));
  for (Index i = 0; i < n_mels + 2; ++i) {
    edges[static_cast<std::size_t>(i)] =
        mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  const double bin_hz = sample_rate / 2.0 / static_cast<double>(n_fft_bins - 1);
  Tensor fb({n_mels, n_fft_bins});
  for (Index m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double c = edges[static_cast<std::size_t>(m + 1)];
    const double hi = edges[static_cast<std::size_t>(m + 2)];
    for (Index k = 0; k < n_fft_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > lo && f <= c) {
        w = (f - lo) / (c - lo);
      } else if (f > c && f < hi) {
        w = (hi - f) / (hi - c);
      }
      fb(m, k) = w;
    }
  }
  return fb;
}

LogMel log_mel(std::span<const double> samples, double sample_rate, const LogMelOptions& opts) {
  if (sample_rate < 16000.0) {
    throw InputError("log_mel: sample rate must be at least 16 kHz");
  }
  const auto window = static_cast<Index>(std::lround(opts.window_ms * sample_rate / 1000.0));
  const auto hop = static_cast<Index>(std::lround(opts.hop_ms * sample_rate / 1000.0));
  if (window < 1 || hop < 1) throw ConfigError("log_mel: window and hop must be positive");
  if (!(opts.floor > 0)) throw ConfigError("log_mel: floor must be positive");
  const auto n = static_cast<Index>(samples.size());
  if (n < window) {
    throw InputError("log_mel: waveform of " + std::to_string(n) +
                     " samples is shorter than one window (" + std::to_string(window) + ")");
  }
  const Index n_fft = opts.n_fft > 0
                          ? opts.n_fft
                          : next_pow2(std::max<Index>(
                                window, static_cast<Index>(std::ceil(sample_rate / 8.0))));
  if (n_fft < window) throw ConfigError("log_mel: n_fft shorter than the window");
  const Index bins = n_fft / 2 + 1;
  const Tensor fb = mel_filterbank(bins, opts.n_mels, sample_rate);
  const Index frames = (n - window) / hop + 1;

  Eigen::VectorXd hann(window);
  for (Index i = 0; i < window; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                   static_cast<double>(window));
  }

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> in(static_cast<std::size_t>(n_fft), 0.0);
  std::vector<std::complex<double>> out;

  Tensor power({frames, bins});
  for (Index f = 0; f < frames; ++f) {
    for (Index i = 0; i < window; ++i) {
      in[static_cast<std::size_t>(i)] = samples[static_cast<std::size_t>(f * hop + i)] * hann[i];
    }
    fft.fwd(out, in);
    for (Index k = 0; k < bins; ++k) power(f, k) = std::norm(out[static_cast<std::size_t>(k)]);
  }

  LogMel result;
  result.frame_rate = sample_rate / static_cast<double>(hop);
  result.frames = Tensor({frames, opts.n_mels});
  result.frames.matrix().noalias() = power.matrix() * fb.matrix().transpose();
  const double floor = opts.floor;
  result.frames.data() =
      result.frames.data().unaryExpr([floor](double e) { return std::log(std::max(e, floor)); });
  return result;
}

std::vector<double> resample_linear(std::span<const double> samples, double from_rate,
                                    double to_rate) {
  if (!(from_rate > 0) || !(to_rate > 0)) throw ConfigError("resample: rates must be positive");
  if (samples.empty()) return {};
  const auto n_out = static_cast<std::size_t>(
      std::floor(static_cast<double>(samples.size() - 1) * to_rate / from_rate) + 1);
  std::vector<double> out(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * from_rate / to_rate;
    const auto i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, samples.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out[i] = samples[i0] * (1.0 - frac) + samples[i1] * frac;
  }
  return out;
}

SfmStack temporal_pool_x8(const SfmStack& stack) {
  stack.validate();
  const Index l = stack.num_layers(), t = stack.num_frames(), d = stack.layers.extent(2);
  const Index tp = (t + kPoolFactor - 1) / kPoolFactor;
  SfmStack out{stack.backbone, Tensor({l, tp, d}), stack.layer_indices};
  for (Index li = 0; li < l; ++li) {
    for (Index w = 0; w < tp; ++w) {
      const Index begin = w * kPoolFactor;
      const Index len = std::min(kPoolFactor, t - begin);
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
          src(stack.layers.raw() + (li * t + begin) * d, len, d);
      Eigen::Map<Eigen::RowVectorXd> dst(out.layers.raw() + (li * tp + w) * d, d);
      dst = src.colwise().sum() / static_cast<double>(len);
    }
  }
  return out;
}

SfmStack select_layers(const SfmStack& stack, const LayerWindow& window) {
  stack.validate();
  if (window.hi < window.lo) throw ConfigError("layer window has hi < lo");
  if (stack.layer_indices.empty() || window.lo < stack.layer_indices.front() ||
      window.hi > stack.layer_indices.back()) {
    throw ConfigError("layer window " + format_layer_window(window) +
                      " outside available layers");
  }
  std::vector<Index> keep;
  for (std::size_t i = 0; i < stack.layer_indices.size(); ++i) {
    const int idx = stack.layer_indices[i];
    if (idx >= window.lo && idx <= window.hi) keep.push_back(static_cast<Index>(i));
  }
  if (keep.empty()) {
    throw ConfigError("layer window " + format_layer_window(window) + " selects no layers");
  }
  const Index t = stack.num_frames(), d = stack.layers.extent(2);
  SfmStack out{stack.backbone, Tensor({static_cast<Index>(keep.size()), t, d}), {}};
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const Index src = keep[k];
    std::copy(stack.layers.raw() + src * t * d, stack.layers.raw() + (src + 1) * t * d,
              out.layers.raw() + static_cast<Index>(k) * t * d);
    out.layer_indices.push_back(stack.layer_indices[static_cast<std::size_t>(src)]);
  }
  return out;
}

Tensor normalize_log_mel(const Tensor& frames, Index valid_frames) {
  Tensor out = frames;
  if (valid_frames < 1) return out;
  auto m = out.matrix();
  const auto valid = m.topRows(valid_frames);
  const Eigen::RowVectorXd mu = valid.colwise().mean();
  Eigen::RowVectorXd sd =
      ((valid.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
  sd = sd.unaryExpr([](double v) { return std::max(v, 1e-8); });
  for (Index r = 0; r < m.rows(); ++r) {
    m.row(r) = ((m.row(r) - mu).array() / sd.array()).matrix();
  }
  return out;
}

void write_sfm_file(const std::filesystem::path& path, const SfmStack& stack) {
  stack.validate();
  io::ByteWriter w;
  w.bytes("SFMF", 4);
  w.le<std::uint32_t>(kFeatureVersion);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(stack.backbone));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(stack.num_layers()));
  for (int idx : stack.layer_indices) w.le<std::uint32_t>(static_cast<std::uint32_t>(idx));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(stack.num_frames()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(stack.layers.extent(2)));
  w.f64_array(stack.layers.raw(), static_cast<std::size_t>(stack.layers.size()));
  w.write_file(path);
}

SfmStack read_sfm_file(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic("SFMF");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFeatureVersion) r.fail("unsupported version " + std::to_string(version));
  const auto backbone = r.le<std::uint8_t>("backbone id");
  if (backbone > static_cast<std::uint8_t>(Backbone::synthetic)) {
    r.fail("unknown backbone id " + std::to_string(backbone));
  }
  const auto n_layers = r.le<std::uint32_t>("layer count");
  if (n_layers == 0) r.fail("zero layers");
  std::vector<int> indices;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    indices.push_back(static_cast<int>(r.le<std::uint32_t>("layer index")));
    if (i > 0 && indices[i] <= indices[i - 1]) r.fail("layer indices not strictly increasing");
  }
  const auto t = r.le<std::uint32_t>("frame count");
  const auto d = r.le<std::uint32_t>("hidden width");
  if (t == 0) r.fail("zero frames");
  if (d != kSfmDim) r.fail("hidden width must be 1024, got " + std::to_string(d));
  SfmStack stack{static_cast<Backbone>(backbone),
                 Tensor({static_cast<Index>(n_layers), static_cast<Index>(t), kSfmDim}),
                 std::move(indices)};
  r.f64_array(stack.layers.raw(), static_cast<std::size_t>(stack.layers.size()), "layer data");
  r.expect_end();
  return stack;
}

void write_log_mel_file(const std::filesystem::path& path, const LogMel& mel) {
  if (mel.frames.rank() != 2 || mel.frames.extent(1) != kMelBands) {
    throw DimensionError("log-Mel must be [T,128], got " + shape_string(mel.frames.shape()));
  }
  io::ByteWriter w;
  w.bytes("LMEL", 4);
  w.le<std::uint32_t>(kFeatureVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(mel.frames.extent(0)));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(kMelBands));
  w.f64_array(mel.frames.raw(), static_cast<std::size_t>(mel.frames.size()));
  w.write_file(path);
}

LogMel read_log_mel_file(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic("LMEL");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFeatureVersion) r.fail("unsupported version " + std::to_string(version));
  const auto t = r.le<std::uint32_t>("frame count");
  const auto d = r.le<std::uint32_t>("band count");
  if (t == 0) r.fail("zero frames");
  if (d != kMelBands) r.fail("band count must be 128, got " + std::to_string(d));
  LogMel mel;
  mel.frames = Tensor({static_cast<Index>(t), kMelBands});
  r.f64_array(mel.frames.raw(), static_cast<std::size_t>(mel.frames.size()), "log-Mel data");
  r.expect_end();
  return mel;
}

StreamFeatures read_stream(const StreamPaths& paths) {
  StreamFeatures s;
  for (const auto& p : paths.sfm) s.sfm.push_back(read_sfm_file(p));
  s.mel = read_log_mel_file(paths.mel);
  s.valid_frames = s.mel.num_frames();
  return s;
}

void write_stream(const StreamPaths& paths, const StreamFeatures& stream) {
  if (paths.sfm.size() != stream.sfm.size()) {
    throw InputError("write_stream: path count does not match backbone count");
  }
  for (std::size_t i = 0; i < paths.sfm.size(); ++i) write_sfm_file(paths.sfm[i], stream.sfm[i]);
  write_log_mel_file(paths.mel, stream.mel);
}

}  // namespace earshot
