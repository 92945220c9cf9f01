#pragma once

// Synthetic spectrogram tasks, deterministic splits and the ".aat" tensor
// container.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aat/errors.hpp"
#include "aat/random.hpp"
#include "aat/tensor.hpp"

namespace aat {

enum class TaskKind { SingleLabel, MultiLabel };

inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::SingleLabel ? "single-label" : "multi-label";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "single-label") return TaskKind::SingleLabel;
  if (s == "multi-label") return TaskKind::MultiLabel;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

struct SyntheticTaskSpec {
  std::size_t num_classes = 4;
  std::size_t time = 64;  // reference grid the class rectangles are laid out on
  std::size_t freq = 64;
  TaskKind kind = TaskKind::SingleLabel;
  double pattern_energy = 3.0;
  double noise_sigma = 0.5;
  /// Alternative sample lengths T; empty means {time}.
  std::vector<std::size_t> length_profile;
  std::uint64_t seed = 0;
  /// Rectangles live in distinct cells of a lattice x lattice grid; 0 picks
  /// the smallest lattice with at least num_classes cells.
  std::size_t lattice = 0;

  std::size_t effective_lattice() const {
    if (lattice > 0) return lattice;
    std::size_t l = 1;
    while (l * l < num_classes) ++l;
    return l;
  }

  std::vector<std::size_t> lengths() const {
    return length_profile.empty() ? std::vector<std::size_t>{time} : length_profile;
  }
};

struct SpectrogramSample {
  Tensor spectrogram;               // T x F
  std::size_t label = 0;            // single-label class
  std::vector<int> targets;         // multi-label indicator vector, size C

  friend bool operator==(const SpectrogramSample&, const SpectrogramSample&) = default;
};

struct Dataset {
  TaskKind kind = TaskKind::SingleLabel;
  std::size_t num_classes = 0;
  std::vector<SpectrogramSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Half-open time/frequency extents as fractions of the sample grid.
struct PatternRect {
  double t0, t1, f0, f1;
};

/// Class rectangles. Each class gets its own lattice cell, so rectangles of
/// different classes never overlap; inside the cell the rectangle's size and
/// offset are drawn from the seed.
inline std::vector<PatternRect> class_rectangles(const SyntheticTaskSpec& spec) {
  const std::size_t lattice = spec.effective_lattice();
  const std::size_t cells = lattice * lattice;
  if (spec.num_classes > cells) {
    throw ConfigError("cannot place " + std::to_string(spec.num_classes) +
                      " disjoint class rectangles on a " + std::to_string(lattice) + "x" +
                      std::to_string(lattice) + " lattice");
  }
  std::vector<std::size_t> order(cells);
  for (std::size_t i = 0; i < cells; ++i) order[i] = i;
  Rng rng(derive_seed(spec.seed, "rectangles"));
  for (std::size_t i = cells; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  const double w = 1.0 / static_cast<double>(lattice);
  std::vector<PatternRect> rects;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const std::size_t cell = order[c];
    const double ct = static_cast<double>(cell / lattice) * w;
    const double cf = static_cast<double>(cell % lattice) * w;
    Rng crng(derive_seed(spec.seed, c));
    std::uniform_real_distribution<double> extent(0.5, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double ht = extent(crng) * w, hf = extent(crng) * w;
    const double ot = unit(crng) * (w - ht), of = unit(crng) * (w - hf);
    rects.push_back({ct + ot, ct + ot + ht, cf + of, cf + of + hf});
  }
  return rects;
}

namespace detail {

inline void paint(Tensor& spec, const PatternRect& r, double energy) {
  const std::size_t t = spec.dim(0), f = spec.dim(1);
  auto lo = [](double frac, std::size_t n) {
    return std::min(n, static_cast<std::size_t>(std::floor(frac * static_cast<double>(n))));
  };
  auto hi = [](double frac, std::size_t n) {
    return std::min(n, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n))));
  };
  for (std::size_t i = lo(r.t0, t); i < hi(r.t1, t); ++i)
    for (std::size_t j = lo(r.f0, f); j < hi(r.f1, f); ++j) spec[i * f + j] += energy;
}

inline std::vector<SpectrogramSample> make_samples(const SyntheticTaskSpec& spec,
                                                   const std::vector<PatternRect>& rects,
                                                   std::size_t count, std::uint64_t stream) {
  const std::vector<std::size_t> lengths = spec.lengths();
  const std::size_t c = spec.num_classes;
  std::vector<SpectrogramSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(derive_seed(spec.seed, stream), i));
    SpectrogramSample s;
    const std::size_t t = lengths[(i / c) % lengths.size()];
    s.spectrogram = Tensor({t, spec.freq});
    if (spec.noise_sigma > 0) fill_normal(s.spectrogram, rng, spec.noise_sigma);
    if (spec.kind == TaskKind::SingleLabel) {
      s.label = i % c;
      paint(s.spectrogram, rects[s.label], spec.pattern_energy);
    } else {
      s.targets.assign(c, 0);
      std::bernoulli_distribution active(0.3);
      bool any = false;
      for (std::size_t k = 0; k < c; ++k) {
        s.targets[k] = active(rng) ? 1 : 0;
        any = any || s.targets[k];
      }
      if (!any) s.targets[std::uniform_int_distribution<std::size_t>(0, c - 1)(rng)] = 1;
      for (std::size_t k = 0; k < c; ++k)
        if (s.targets[k]) paint(s.spectrogram, rects[k], spec.pattern_energy);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// Noise plus class patterns; a pure function of `spec`. Single-label classes
/// are assigned round-robin, so every class count differs by at most one.
inline std::pair<Dataset, Dataset> generate_dataset(const SyntheticTaskSpec& spec,
                                                    std::size_t n_train, std::size_t n_test) {
  if (n_train == 0 || n_test == 0) throw ContractError("dataset sizes must be at least 1");
  if (spec.num_classes == 0) throw ConfigError("num_classes must be positive");
  if (!(spec.pattern_energy > 0)) throw ConfigError("pattern_energy must be positive");
  if (spec.noise_sigma < 0) throw ConfigError("noise_sigma must be non-negative");
  for (std::size_t t : spec.lengths())
    if (t == 0) throw ConfigError("length_profile entries must be positive");
  const auto rects = class_rectangles(spec);
  Dataset train{spec.kind, spec.num_classes, detail::make_samples(spec, rects, n_train, 1)};
  Dataset test{spec.kind, spec.num_classes, detail::make_samples(spec, rects, n_test, 2)};
  return {std::move(train), std::move(test)};
}

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(p[i - 1], p[pick(rng)]);
  }
  return p;
}

/// Seeded permutation then prefix split: round(fraction * n) samples go to
/// the first part.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("split fraction must be in (0,1)");
  const std::size_t n = data.size();
  const auto n_a = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_a == 0 || n_a >= n) {
    throw ContractError("split of " + std::to_string(n) + " samples at " +
                        std::to_string(fraction) + " leaves a part empty");
  }
  const auto perm = permutation(n, seed);
  Dataset a{data.kind, data.num_classes, {}}, b{data.kind, data.num_classes, {}};
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_a ? a : b).samples.push_back(data.samples[perm[i]]);
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Tensor container
//
// Little-endian. "AATT", u32 version (1), u32 entry count; then per entry:
// u32 name length, UTF-8 name, u32 rank, u64 per dimension, f64 payload.

using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kTensorFileVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(static_cast<std::uint64_t>(v) >> (8 * i) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensors(const TensorMap& tensors) {
  std::string out = "AATT";
  detail::put_le<std::uint32_t>(out, kTensorFileVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.empty()) throw FormatError("empty tensor name", out.size());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline TensorMap decode_tensors(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(4, "magic") != "AATT") throw FormatError("bad magic", 0);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kTensorFileVersion) {
    throw FormatError("unsupported version " + std::to_string(version), 4);
  }
  const auto count = in.get<std::uint32_t>("entry count");
  TensorMap out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t entry_start = in.offset();
    const auto len = in.get<std::uint32_t>("name length");
    std::string name(in.take(len, "name"));
    if (name.empty()) throw FormatError("empty tensor name", entry_start);
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank > in.remaining() / 8) throw FormatError("truncated dims", in.offset());
    Shape shape(rank);
    std::uint64_t count_values = 1;
    for (auto& d : shape) {
      d = in.get<std::uint64_t>("dims");
      if (d != 0 && count_values > in.remaining() / d) count_values = in.remaining() + 1;
      else count_values *= d;
    }
    if (count_values > in.remaining() / 8) throw FormatError("truncated payload", in.offset());
    std::vector<double> values(count_values);
    for (double& v : values) v = std::bit_cast<double>(in.get<std::uint64_t>("payload"));
    if (out.contains(name)) throw FormatError("duplicate tensor name '" + name + "'", entry_start);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes", in.offset());
  return out;
}

inline void save_tensors(const std::filesystem::path& path, const TensorMap& tensors) {
  const std::string bytes = encode_tensors(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for " + path.string());
}

inline TensorMap load_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

/// Dataset as a tensor map: "spectrogram/<i>" plus "label/<i>", a scalar
/// class index for single-label data or a C-vector of 0/1 for multi-label.
inline TensorMap dataset_to_tensors(const Dataset& data) {
  TensorMap out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SpectrogramSample& s = data.samples[i];
    out.emplace("spectrogram/" + std::to_string(i), s.spectrogram);
    if (data.kind == TaskKind::SingleLabel) {
      out.emplace("label/" + std::to_string(i), Tensor::scalar(static_cast<double>(s.label)));
    } else {
      out.emplace("label/" + std::to_string(i),
                  Tensor::vector(std::vector<double>(s.targets.begin(), s.targets.end())));
    }
  }
  return out;
}

inline Dataset dataset_from_tensors(const TensorMap& tensors) {
  Dataset data;
  bool kind_known = false;
  for (std::size_t i = 0;; ++i) {
    auto spec = tensors.find("spectrogram/" + std::to_string(i));
    auto label = tensors.find("label/" + std::to_string(i));
    if (spec == tensors.end() && label == tensors.end()) break;
    if (spec == tensors.end() || label == tensors.end()) {
      throw FormatError("sample " + std::to_string(i) + " is missing its pair", 0);
    }
    SpectrogramSample s;
    s.spectrogram = spec->second;
    const Tensor& l = label->second;
    const TaskKind kind = l.rank() == 0 ? TaskKind::SingleLabel : TaskKind::MultiLabel;
    if (kind_known && kind != data.kind) throw FormatError("mixed label kinds", 0);
    data.kind = kind;
    kind_known = true;
    if (kind == TaskKind::SingleLabel) {
      s.label = static_cast<std::size_t>(l.item());
      data.num_classes = std::max(data.num_classes, s.label + 1);
    } else {
      for (double v : l.data()) s.targets.push_back(v != 0.0 ? 1 : 0);
      data.num_classes = l.size();
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace aat
