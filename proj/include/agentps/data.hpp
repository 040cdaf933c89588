// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "agentps/errors.hpp"
#include "agentps/rng.hpp"
#include "agentps/tensor.hpp"

namespace agentps {

/// Frames of a square grayscale image, row-major, values in [0, 1].
struct Image {
  std::size_t frames = 0;
  std::size_t size = 0;
  std::vector<float> pixels;

  float& at(std::size_t f, std::size_t r, std::size_t c) {
    return pixels[(f * size + r) * size + c];
  }
  float at(std::size_t f, std::size_t r, std::size_t c) const {
    return pixels[(f * size + r) * size + c];
  }

  template <class T>
  Tensor<T> tensor() const {
    return Tensor<T>({frames, size, size}, std::vector<T>(pixels.begin(), pixels.end()));
  }

  friend bool operator==(const Image&, const Image&) = default;
};

struct Sample {
  std::string id;
  Image image;
  std::string text;
  std::vector<int> process_labels;
  int final_label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Attribute order of the synthetic task; also the ancillary question order.
enum Attribute : std::size_t {
  kWatermark = 0,   // diagonal bright stripe in the first frame
  kSynthetic = 1,   // centred bright blob
  kOriginalText = 2,  // text carries a subjective/emotional word
  kCoherent = 3,    // second frame repeats the first
};
inline constexpr std::size_t kAttributeCount = 4;

/// Final label of the synthetic task: content is unoriginal (1) when it is
/// watermarked or its frames are incoherent, unless the text is original.
///
///   W U T C | y        W U T C | y
///   0 * 0 0 | 1        1 * 0 * | 1
///   0 * 0 1 | 0        * * 1 * | 0
///
/// The blob attribute U never affects the label.
inline int final_label_rule(const std::array<int, kAttributeCount>& a) {
  const bool watermark = a[kWatermark] != 0;
  const bool text_original = a[kOriginalText] != 0;
  const bool coherent = a[kCoherent] != 0;
  return ((watermark || !coherent) && !text_original) ? 1 : 0;
}

struct DatasetSpec {
  std::size_t n_samples = 1000;
  std::size_t n_questions = kAttributeCount;
  std::size_t image_size = 16;
  std::size_t frames = 2;
  double stripe_intensity = 0.5;
  double blob_radius = 3.0;
  double blob_intensity = 0.5;
  double background_min = 0.1;
  double background_max = 0.5;
  // Minimum background difference between the frames of an incoherent sample.
  double incoherent_gap = 0.15;
  // Per-pixel background texture, uniform in [-a, a]. Coherent frames share
  // the first frame's texture; an incoherent frame draws its own.
  double texture_amplitude = 0.0;
  double noise_sigma = 0.15;
  std::string label_rule = "unoriginal";
  double class_balance = 0.5;
  std::size_t text_words = 6;
  std::string id_prefix = "s";
  std::uint64_t seed = 1;

  void validate() const {
    if (n_questions != kAttributeCount) {
      throw ConfigError("the synthetic generator has exactly 4 ancillary attributes, got N=" +
                        std::to_string(n_questions));
    }
    if (label_rule != "unoriginal") throw ConfigError("unknown label rule '" + label_rule + "'");
    if (frames < 2) throw ConfigError("the coherence attribute needs at least 2 frames");
    if (image_size < 4) throw ConfigError("image_size must be at least 4");
    if (!(class_balance > 0.0 && class_balance < 1.0)) {
      throw ConfigError("class_balance must lie in (0, 1)");
    }
    if (!(background_min >= 0.0 && background_max <= 1.0 && background_min < background_max)) {
      throw ConfigError("background range must satisfy 0 <= min < max <= 1");
    }
    if (texture_amplitude < 0.0) throw ConfigError("texture_amplitude must be >= 0");
    if (incoherent_gap >= background_max - background_min) {
      throw ConfigError("incoherent_gap must be smaller than the background range");
    }
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
    if (text_words < 1) throw ConfigError("text_words must be >= 1");
  }
};

/// Word pools of the synthetic captions. An original caption contains exactly
/// one subjective word; a flat caption contains one neutral marker word instead.
struct TextPools {
  static const std::vector<std::string>& subjective() {
    static const std::vector<std::string> words{
        "love", "hate", "amazing", "awful", "happy", "sad",
        "beautiful", "disgusting", "great", "terrible", "wonderful", "boring"};
    return words;
  }
  static const std::vector<std::string>& flat() {
    static const std::vector<std::string> words{
        "lyrics", "remix", "official", "edit", "cover", "version",
        "full", "hd", "copy", "repost", "upload", "audio"};
    return words;
  }
  static const std::vector<std::string>& filler() {
    static const std::vector<std::string> words{
        "the", "a", "photo", "of", "city", "street", "song", "night", "day", "river",
        "old", "new", "album", "post", "video", "clip", "from", "with", "and", "in",
        "on", "summer", "winter", "music", "movie", "scene", "light", "blue", "red", "green"};
    return words;
  }
  static std::vector<std::string> all() {
    std::vector<std::string> out;
    for (const auto* pool : {&subjective(), &flat(), &filler()}) {
      out.insert(out.end(), pool->begin(), pool->end());
    }
    return out;
  }
};

/// Marginal probabilities of the four independent attributes chosen so that
/// P(final = 1) equals the requested balance b. With P(W) = 1/2:
///   P(y=1) = (1 - (1 - P(W)) P(C)) (1 - P(T)).
/// For b <= 3/4 we keep P(C) = 1/2 and solve P(T) = 1 - b / (3/4); above that
/// P(T) = 0 and P(C) = 2 (1 - b).
struct AttributeMarginals {
  double watermark = 0.5;
  double synthetic = 0.5;
  double original_text = 0.0;
  double coherent = 0.5;

  static AttributeMarginals for_balance(double b) {
    AttributeMarginals m;
    if (b <= 0.75) {
      m.original_text = 1.0 - b / 0.75;
    } else {
      m.original_text = 0.0;
      m.coherent = 2.0 * (1.0 - b);
    }
    return m;
  }
};

namespace detail {

inline std::string make_id(std::string_view prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu", index);
  return std::string(prefix) + "-" + buf;
}

inline std::string make_caption(bool original, std::size_t words, Rng& rng) {
  const auto& keys = original ? TextPools::subjective() : TextPools::flat();
  const auto& filler = TextPools::filler();
  const std::size_t key_at = rng.below(words);
  std::string out;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) out += ' ';
    out += i == key_at ? keys[rng.below(keys.size())] : filler[rng.below(filler.size())];
  }
  return out;
}

}  // namespace detail

/// One synthetic sample; deterministic in (spec, index).
inline Sample generate_sample(const DatasetSpec& spec, std::size_t index) {
  Rng rng = Rng(spec.seed).split("dataset").split(index);
  const auto marg = AttributeMarginals::for_balance(spec.class_balance);
  std::array<int, kAttributeCount> attrs{};
  attrs[kWatermark] = rng.bernoulli(marg.watermark);
  attrs[kSynthetic] = rng.bernoulli(marg.synthetic);
  attrs[kOriginalText] = rng.bernoulli(marg.original_text);
  attrs[kCoherent] = rng.bernoulli(marg.coherent);

  const std::size_t n = spec.image_size;
  Image img{spec.frames, n, std::vector<float>(spec.frames * n * n)};
  const double bg = rng.uniform(spec.background_min, spec.background_max);
  const double centre = (static_cast<double>(n) - 1.0) / 2.0;
  std::vector<double> texture(n * n), other_texture(n * n);
  for (auto& t : texture) t = spec.texture_amplitude * (2.0 * rng.uniform() - 1.0);
  auto first_frame_value = [&](std::size_t r, std::size_t c) {
    double v = bg + texture[r * n + c];
    if (attrs[kWatermark] && r == c) v += spec.stripe_intensity;
    const double dr = static_cast<double>(r) - centre, dc = static_cast<double>(c) - centre;
    if (attrs[kSynthetic] && dr * dr + dc * dc <= spec.blob_radius * spec.blob_radius) {
      v += spec.blob_intensity;
    }
    return v;
  };
  double other_bg = bg;
  if (!attrs[kCoherent]) {
    do {
      other_bg = rng.uniform(spec.background_min, spec.background_max);
    } while (std::abs(other_bg - bg) < spec.incoherent_gap);
    for (auto& t : other_texture) t = spec.texture_amplitude * (2.0 * rng.uniform() - 1.0);
  }
  for (std::size_t f = 0; f < spec.frames; ++f) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        double v = (f == 0 || attrs[kCoherent]) ? first_frame_value(r, c) : other_bg + other_texture[r * n + c];
        v += spec.noise_sigma * rng.normal();
        img.at(f, r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  Sample s;
  s.id = detail::make_id(spec.id_prefix, index);
  s.image = std::move(img);
  s.text = detail::make_caption(attrs[kOriginalText] != 0, spec.text_words, rng);
  s.process_labels.assign(attrs.begin(), attrs.end());
  s.final_label = final_label_rule(attrs);
  return s;
}

inline std::vector<Sample> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

// ---------------------------------------------------------------------------
// JSONL I/O

inline nlohmann::ordered_json sample_to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  auto frames = nlohmann::ordered_json::array();
  for (std::size_t f = 0; f < s.image.frames; ++f) {
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < s.image.size; ++r) {
      auto row = nlohmann::ordered_json::array();
      for (std::size_t c = 0; c < s.image.size; ++c) {
        // Six decimals keeps lines short; the round trip is exact to 1e-6.
        row.push_back(std::round(static_cast<double>(s.image.at(f, r, c)) * 1e6) / 1e6);
      }
      rows.push_back(std::move(row));
    }
    frames.push_back(std::move(rows));
  }
  j["image"] = std::move(frames);
  j["text"] = s.text;
  j["process_labels"] = s.process_labels;
  j["final_label"] = s.final_label;
  return j;
}

namespace detail {

template <class Json>
const Json& require_field(const Json& j, const char* field, std::size_t line) {
  auto it = j.find(field);
  if (it == j.end()) {
    throw SchemaError("line " + std::to_string(line) + ": missing field '" + field + "'");
  }
  return *it;
}

inline Image image_from_json(const nlohmann::json& j, std::size_t line) {
  auto bad = [line](const std::string& why) {
    return SchemaError("line " + std::to_string(line) + ": field 'image' " + why);
  };
  if (!j.is_array() || j.empty()) throw bad("must be a non-empty array of frames");
  Image img;
  img.frames = j.size();
  img.size = j[0].size();
  if (img.size == 0) throw bad("has an empty frame");
  img.pixels.reserve(img.frames * img.size * img.size);
  for (const auto& frame : j) {
    if (!frame.is_array() || frame.size() != img.size) throw bad("frames must be square");
    for (const auto& row : frame) {
      if (!row.is_array() || row.size() != img.size) throw bad("frames must be square");
      for (const auto& v : row) {
        if (!v.is_number()) throw bad("must contain numbers");
        img.pixels.push_back(v.get<float>());
      }
    }
  }
  return img;
}

}  // namespace detail

inline Sample sample_from_json(const nlohmann::json& j, std::size_t line = 0) {
  if (!j.is_object()) throw SchemaError("line " + std::to_string(line) + ": not a JSON object");
  Sample s;
  try {
    s.id = detail::require_field(j, "id", line).get<std::string>();
    s.image = detail::image_from_json(detail::require_field(j, "image", line), line);
    s.text = detail::require_field(j, "text", line).get<std::string>();
    s.process_labels = detail::require_field(j, "process_labels", line).get<std::vector<int>>();
    s.final_label = detail::require_field(j, "final_label", line).get<int>();
  } catch (const nlohmann::json::type_error& e) {
    throw SchemaError("line " + std::to_string(line) + ": wrong field type: " + e.what());
  }
  return s;
}

inline void write_jsonl(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const auto& s : samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw FileError("write failed for '" + path.string() + "'");
}

/// Calls `fn(json, line_number)` for every non-empty line of a JSONL file.
template <class Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(number, std::string("malformed JSON: ") + e.what());
    }
    fn(j, number);
  }
}

inline std::vector<Sample> read_jsonl(const std::filesystem::path& path) {
  std::vector<Sample> out;
  for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t line) {
    out.push_back(sample_from_json(j, line));
  });
  return out;
}

/// FNV-1a over the canonical JSONL serialization.
inline std::uint64_t dataset_hash(const std::vector<Sample>& samples) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& s : samples) {
    const std::string line = sample_to_json(s).dump();
    for (char c : line) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ull;
    }
    h ^= '\n';
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace agentps
