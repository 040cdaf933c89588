// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Remote annotation client. Requires OpenSSL (base64, HTTPS) and libpng at
// link time; define AGENTPS_HTTPS to enable https:// endpoints.

#ifdef AGENTPS_HTTPS
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#endif

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "agentps/annotator.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"

namespace agentps {

struct QuestionTemplate {
  std::string text;
  QuestionKind kind = QuestionKind::kBinary;
  int count_threshold = 1;
};

/// Question battery sent to the annotator: N process questions, then the
/// final question.
struct TemplateSet {
  std::string preamble =
      "You are reviewing a short post made of two video frames and a caption. "
      "Answer each numbered question on its own line as '<number>: <answer>'.";
  std::vector<QuestionTemplate> process;
  QuestionTemplate final;

  static TemplateSet defaults() {
    TemplateSet t;
    t.process = {
        {"Is a bright diagonal stripe (a watermark) visible in the frames? Answer yes or no.",
         QuestionKind::kBinary, 1},
        {"Count the number of frames that contain a bright blob in the centre.",
         QuestionKind::kCount, 1},
        {"Does the caption add personal commentary or opinion? Answer yes or no.",
         QuestionKind::kBinary, 1},
        {"Do the two frames show the same scene? Answer yes or no.", QuestionKind::kBinary, 1},
    };
    t.final = {"Is this post unoriginal content? Answer yes or no.", QuestionKind::kBinary, 1};
    return t;
  }

  /// Plain-text file, one template per non-empty line; lines starting with
  /// '#' are comments. An optional "[binary]", "[count]" or "[count>=k]"
  /// prefix sets the question kind. The last template is the final question.
  static TemplateSet load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open template file '" + path.string() + "'");
    TemplateSet t;
    std::vector<QuestionTemplate> all;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      line = line.substr(first);
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      QuestionTemplate q;
      if (line.front() == '[') {
        const auto close = line.find(']');
        if (close == std::string::npos) throw ParseError(lineno, "unterminated kind tag");
        const std::string tag = line.substr(1, close - 1);
        if (tag == "binary") {
          q.kind = QuestionKind::kBinary;
        } else if (tag == "count") {
          q.kind = QuestionKind::kCount;
        } else if (tag.rfind("count>=", 0) == 0) {
          q.kind = QuestionKind::kCount;
          try {
            q.count_threshold = std::stoi(tag.substr(7));
          } catch (const std::exception&) {
            throw ParseError(lineno, "bad count threshold in '" + tag + "'");
          }
        } else {
          throw ParseError(lineno, "unknown kind tag '" + tag + "'");
        }
        line = line.substr(close + 1);
        line.erase(0, line.find_first_not_of(' '));
      }
      q.text = line;
      all.push_back(std::move(q));
    }
    if (all.size() < 2) throw SchemaError("template file needs at least one process and one final question");
    t.final = all.back();
    all.pop_back();
    t.process = std::move(all);
    return t;
  }

  std::string prompt(const std::string& caption) const {
    std::ostringstream os;
    os << preamble << "\nCaption: \"" << caption << "\"\n";
    for (std::size_t i = 0; i < process.size(); ++i) os << i + 1 << ". " << process[i].text << '\n';
    os << process.size() + 1 << ". " << final.text << '\n';
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Encoding

inline std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

/// One frame as an 8-bit grayscale PNG.
inline std::string encode_png(const Image& img, std::size_t frame) {
  std::vector<std::uint8_t> gray(img.size * img.size);
  for (std::size_t r = 0; r < img.size; ++r) {
    for (std::size_t c = 0; c < img.size; ++c) {
      const double v = std::clamp(static_cast<double>(img.at(frame, r, c)), 0.0, 1.0);
      gray[r * img.size + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.size);
  image.height = static_cast<png_uint_32>(img.size);
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, gray.data(), 0, nullptr)) {
    throw Error(std::string("PNG sizing failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, gray.data(), 0, nullptr)) {
    throw Error(std::string("PNG encoding failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

// ---------------------------------------------------------------------------
// Endpoint and provider adapters

struct RemoteConfig {
  std::string provider = "generic";  // generic | openai
  std::string model = "gpt-4o";
  std::string url_env = "AGENTPS_ANNOTATOR_URL";
  std::string key_env = "AGENTPS_ANNOTATOR_KEY";
  std::size_t max_in_flight = 4;
  std::size_t max_retries = 4;
  int timeout_ms = 30000;
  int backoff_ms = 500;

  void validate() const {
    if (provider != "generic" && provider != "openai") {
      throw ConfigError("unknown annotator provider '" + provider + "' (generic|openai)");
    }
    if (max_in_flight == 0) throw ConfigError("annotator max_in_flight must be >= 1");
    if (timeout_ms <= 0) throw ConfigError("annotator timeout_ms must be > 0");
    if (backoff_ms < 0) throw ConfigError("annotator backoff_ms must be >= 0");
  }
};

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;  // /v1/...
  std::string key;

  /// Reads URL and credential from the environment; missing values are a
  /// startup error.
  static Endpoint from_env(const RemoteConfig& cfg) {
    const char* url = std::getenv(cfg.url_env.c_str());
    const char* key = std::getenv(cfg.key_env.c_str());
    if (!url || !*url) throw ConfigError("remote annotation needs an endpoint URL in $" + cfg.url_env);
    if (!key || !*key) throw ConfigError("remote annotation needs a credential in $" + cfg.key_env);
    return parse(url, key);
  }

  static Endpoint parse(const std::string& url, std::string key) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ConfigError("endpoint URL '" + url + "' has no scheme");
    const std::string s = url.substr(0, scheme);
    if (s != "http" && s != "https") throw ConfigError("endpoint scheme must be http or https");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (s == "https") throw ConfigError("this build has no TLS support; use an http:// endpoint");
#endif
    const auto slash = url.find('/', scheme + 3);
    Endpoint e;
    e.base = url.substr(0, slash);
    e.path = slash == std::string::npos ? "/" : url.substr(slash);
    e.key = std::move(key);
    return e;
  }
};

namespace detail {

inline nlohmann::json build_request(const RemoteConfig& cfg, const std::string& prompt,
                                    const std::vector<std::string>& pngs_b64) {
  nlohmann::json j;
  if (cfg.provider == "openai") {
    auto content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", prompt}});
    for (const auto& b : pngs_b64) {
      content.push_back(
          {{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + b}}}});
    }
    j["model"] = cfg.model;
    j["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", content}}});
    j["temperature"] = 0;
  } else {
    j["model"] = cfg.model;
    j["prompt"] = prompt;
    j["images"] = pngs_b64;
  }
  return j;
}

inline std::string extract_text(const RemoteConfig& cfg, const std::string& body) {
  const auto j = nlohmann::json::parse(body);
  if (cfg.provider == "openai") return j.at("choices").at(0).at("message").at("content").get<std::string>();
  return j.at("text").get<std::string>();
}

inline bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace detail

/// Splits a battery response into per-question answers. Lines of the form
/// "k: ...", "k. ..." or "k) ..." answer question k (1-based). A response
/// without numbered lines is treated as the answer to question 1 only when
/// there is exactly one question.
inline std::vector<std::string> split_answers(const std::string& text, std::size_t n_questions) {
  std::vector<std::string> out(n_questions);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::size_t i = line.find_first_not_of(" \t*");
    if (i == std::string::npos) continue;
    std::size_t j = i;
    while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) ++j;
    if (j == i || j >= line.size() || (line[j] != ':' && line[j] != '.' && line[j] != ')')) continue;
    const auto k = std::stoul(line.substr(i, j - i));
    if (k >= 1 && k <= n_questions && out[k - 1].empty()) out[k - 1] = line.substr(j + 1);
  }
  if (n_questions == 1 && out[0].empty()) out[0] = text;
  return out;
}

inline AnnotationResult parse_battery(const std::string& id, const std::string& text,
                                      const TemplateSet& templates) {
  const std::size_t n = templates.process.size();
  const auto answers = split_answers(text, n + 1);
  AnnotationResult r;
  r.id = id;
  r.source = AnnotationSource::kRemote;
  r.raw_response = text;
  for (std::size_t q = 0; q < n; ++q) {
    const auto& t = templates.process[q];
    r.process.push_back(parse_response(answers[q], t.kind, t.count_threshold));
  }
  r.final = parse_response(answers[n], templates.final.kind, templates.final.count_threshold);
  return r;
}

/// Queries the endpoint once per sample with all frames and the whole
/// question battery. At most `max_in_flight` requests run at once; results
/// come back in sample order. Timeouts, connection failures, 408, 429 and
/// 5xx are retried with exponential backoff; other failures are recorded on
/// the sample (all labels MISSING) and the batch continues.
inline std::vector<AnnotationResult> remote_annotate(
    const std::vector<Sample>& samples, const Endpoint& endpoint, const RemoteConfig& cfg,
    const TemplateSet& templates, const std::function<void(const std::string&)>& log = {}) {
  cfg.validate();
  std::vector<AnnotationResult> results(samples.size());
  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };

  auto annotate_one = [&](const Sample& s) {
    std::vector<std::string> images;
    for (std::size_t f = 0; f < s.image.frames; ++f) images.push_back(base64_encode(encode_png(s.image, f)));
    const std::string body = detail::build_request(cfg, templates.prompt(s.text), images).dump();

    httplib::Client client(endpoint.base);
    const auto timeout = std::chrono::milliseconds(cfg.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    client.set_bearer_token_auth(endpoint.key);

    AnnotationResult failed;
    failed.id = s.id;
    failed.source = AnnotationSource::kRemote;
    failed.process.assign(templates.process.size(), std::nullopt);

    for (std::size_t attempt = 0;; ++attempt) {
      auto res = client.Post(endpoint.path, body, "application/json");
      std::string problem;
      bool transient = false;
      if (!res) {
        problem = "transport error: " + httplib::to_string(res.error());
        transient = true;
      } else if (res->status != 200) {
        problem = "HTTP " + std::to_string(res->status);
        transient = detail::transient_status(res->status);
      } else {
        try {
          auto r = parse_battery(s.id, detail::extract_text(cfg, res->body), templates);
          r.retries = attempt;
          return r;
        } catch (const nlohmann::json::exception& e) {
          problem = std::string("malformed response body: ") + e.what();
        }
      }
      if (!transient || attempt >= cfg.max_retries) {
        failed.error = problem;
        failed.retries = attempt;
        say("annotation of " + s.id + " failed: " + problem);
        return failed;
      }
      const auto wait = std::chrono::milliseconds(static_cast<long long>(cfg.backoff_ms) << attempt);
      say("retry " + std::to_string(attempt + 1) + " for " + s.id + " after " + problem + " (waiting " +
          std::to_string(wait.count()) + " ms)");
      std::this_thread::sleep_for(wait);
    }
  };

  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::min(cfg.max_in_flight, std::max<std::size_t>(samples.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < samples.size(); i = next++) {
        try {
          results[i] = annotate_one(samples[i]);
        } catch (const std::exception& e) {
          auto& r = results[i];
          r.id = samples[i].id;
          r.source = AnnotationSource::kRemote;
          r.process.assign(templates.process.size(), std::nullopt);
          r.error = e.what();
          say("annotation of " + r.id + " failed: " + r.error);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

}  // namespace agentps
