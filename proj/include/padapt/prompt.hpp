#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <regex>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "padapt/lm.hpp"
#include "padapt/log.hpp"

namespace padapt {

class TemplateError : public Error {
 public:
  using Error::Error;
};

class SpliceError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

namespace tokens {
inline constexpr const char* image = "<image>";
inline constexpr const char* image_here = "<ImageHere>";
inline constexpr const char* ref_open = "<ref>";
inline constexpr const char* ref_close = "</ref>";
inline constexpr const char* box_open = "<box>";
inline constexpr const char* box_close = "</box>";
inline constexpr const char* eos = "<eos>";
inline constexpr const char* unk = "<unk>";
}  // namespace tokens

/// Closed word list of the synthetic tasks and their prompt templates.
inline const std::vector<std::string>& synthetic_lexicon() {
  static const std::vector<std::string> words = {
      // prompt templates
      "A", "short", "image", "caption", "Question", "Short", "answer",
      // captions
      "a", "and", "on", "white", "background",
      // questions and answers
      "what", "color", "is", "the", "which", "side", "left", "right", "how", "many", "shapes", "are", "there",
      "one", "two", "three", "shape", "yes", "no",
      // shape kinds
      "square", "circle", "bar",
      // palette
      "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"};
  return words;
}

/// Word-level vocabulary. Every lexicon word exists bare and with a leading
/// space, so tokenization is lossless without a separate whitespace model.
/// Tokenization is greedy longest match; bytes that match nothing become
/// <unk>.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(synthetic_lexicon()) {}

  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* s : {tokens::unk, tokens::eos, tokens::image, tokens::image_here, tokens::ref_open,
                          tokens::ref_close, tokens::box_open, tokens::box_close})
      add(s);
    for (char d = '0'; d <= '9'; ++d) add(std::string(1, d));
    for (const char* s : {".", ",", "(", ")", ":", "?", " "}) add(s);
    for (const auto& w : words) {
      add(w);
      add(" " + w);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::size_t id(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) throw ConfigError("token not in vocabulary: '" + tok + "'");
    return it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  std::size_t unk_id() const { return 0; }
  std::size_t eos_id() const { return 1; }
  std::size_t image_here_id() const { return 3; }

  std::vector<std::size_t> tokenize(std::string_view text) const {
    std::vector<std::size_t> out;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t best_len = 0, best_id = 0;
      const std::size_t max_len = std::min(max_len_, text.size() - i);
      for (std::size_t len = max_len; len > 0; --len) {
        auto it = index_.find(std::string(text.substr(i, len)));
        if (it != index_.end()) {
          best_len = len;
          best_id = it->second;
          break;
        }
      }
      if (best_len == 0) {
        out.push_back(unk_id());
        i += utf8_length(static_cast<unsigned char>(text[i]));
        continue;
      }
      out.push_back(best_id);
      i += best_len;
    }
    return out;
  }

  std::string detokenize(std::span<const std::size_t> ids) const {
    std::string out;
    for (auto id : ids) out += token(id);
    return out;
  }

 private:
  void add(const std::string& tok) {
    if (index_.emplace(tok, tokens_.size()).second) {
      tokens_.push_back(tok);
      max_len_ = std::max(max_len_, tok.size());
    }
  }

  static std::size_t utf8_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t max_len_ = 0;
};

// ---------------------------------------------------------------------------
// Records and templates
// ---------------------------------------------------------------------------

enum class Task { caption = 0, vqa = 1, grounding = 2 };

inline constexpr std::array<Task, 3> kAllTasks{Task::caption, Task::vqa, Task::grounding};

inline std::string task_name(Task t) {
  switch (t) {
    case Task::caption: return "caption";
    case Task::vqa: return "vqa";
    case Task::grounding: return "grounding";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "caption") return Task::caption;
  if (s == "vqa") return Task::vqa;
  if (s == "grounding") return Task::grounding;
  throw ConfigError("unknown task: " + std::string(s));
}

struct PromptRecord {
  Task task = Task::caption;
  std::string image;
  std::string question;  // vqa
  std::string expr;      // grounding
  std::string target;

  friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

/// Prompt text preceding the label. Stage 1 trains on captions only; later
/// stages use the per-task templates.
inline std::string render_prompt(const PromptRecord& rec, int stage) {
  if (stage < 1 || stage > 3) throw TemplateError("unknown stage " + std::to_string(stage));
  if (stage == 1 && rec.task != Task::caption) throw TemplateError("stage 1 uses caption prompts only");
  const std::string head = std::string(tokens::image) + tokens::image_here;
  switch (rec.task) {
    case Task::caption:
      return head + "A short image caption: ";
    case Task::vqa:
      if (rec.question.empty()) throw TemplateError("vqa record is missing its question");
      return head + "Question: " + rec.question + " Short answer: ";
    case Task::grounding:
      if (rec.expr.empty()) throw TemplateError("grounding record is missing its referring expression");
      return head + tokens::ref_open + rec.expr + tokens::ref_close;
  }
  throw TemplateError("unknown task");
}

inline nlohmann::json record_to_json(const PromptRecord& r) {
  nlohmann::json j;
  j["task"] = task_name(r.task);
  j["image"] = r.image;
  if (r.task == Task::vqa) j["question"] = r.question;
  if (r.task == Task::grounding) j["expr"] = r.expr;
  j["target"] = r.target;
  return j;
}

inline PromptRecord record_from_json(const nlohmann::json& j) {
  try {
    PromptRecord r;
    r.task = parse_task(j.at("task").get<std::string>());
    r.image = j.at("image").get<std::string>();
    if (r.task == Task::vqa) r.question = j.at("question").get<std::string>();
    if (r.task == Task::grounding) r.expr = j.at("expr").get<std::string>();
    r.target = j.at("target").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed prompt record: ") + e.what());
  }
}

inline void write_records(const std::string& path, const std::vector<PromptRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const auto& r : records) os << record_to_json(r).dump() << '\n';
  if (!os) throw IoError("failed writing: " + path);
}

inline std::vector<PromptRecord> read_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<PromptRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Boxes
// ---------------------------------------------------------------------------

/// Normalized corner box, (x1, y1) upper left, (x2, y2) lower right.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const {
    for (double v : {x1, y1, x2, y2})
      if (!(v >= 0.0 && v <= 1.0)) return false;
    return x1 <= x2 && y1 <= y2;
  }
  double area() const { return (x2 - x1) * (y2 - y1); }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

namespace detail {

inline std::string fixed3(double v) {
  const auto milli = static_cast<long long>(std::round(v * 1000.0));  // half away from zero
  std::string frac = std::to_string(milli % 1000);
  return std::to_string(milli / 1000) + "." + std::string(3 - frac.size(), '0') + frac;
}

}  // namespace detail

inline std::string serialize_box(const BoundingBox& b) {
  for (double v : {b.x1, b.y1, b.x2, b.y2})
    if (!(v >= 0.0 && v <= 1.0)) throw RangeError("box coordinate outside [0,1]");
  if (b.x1 > b.x2 || b.y1 > b.y2) throw RangeError("box corners out of order");
  return std::string(tokens::box_open) + "(" + detail::fixed3(b.x1) + "," + detail::fixed3(b.y1) + "),(" +
         detail::fixed3(b.x2) + "," + detail::fixed3(b.y2) + ")" + tokens::box_close;
}

enum class BoxParseStatus { ok, not_found, malformed };

struct BoxParse {
  BoxParseStatus status = BoxParseStatus::not_found;
  BoundingBox box;
  bool clamped = false;

  bool ok() const { return status == BoxParseStatus::ok; }
};

/// Extracts the first well-formed "<box>(x1,y1),(x2,y2)</box>" substring.
/// The closing tag may be missing (truncated generations). Coordinates
/// outside [0,1] are clamped; corners out of order are reported as
/// malformed.
inline BoxParse parse_box(std::string_view text) {
  static const std::regex pattern(
      R"(<box>\((-?\d+(?:\.\d+)?),(-?\d+(?:\.\d+)?)\),\((-?\d+(?:\.\d+)?),(-?\d+(?:\.\d+)?)\)(?:</box>)?)");
  std::match_results<std::string_view::const_iterator> m;
  BoxParse out;
  if (!std::regex_search(text.begin(), text.end(), m, pattern)) return out;
  double v[4];
  for (int k = 0; k < 4; ++k) {
    const auto& sub = m[k + 1];
    const char* first = &*sub.first;
    const auto res = std::from_chars(first, first + sub.length(), v[k]);
    if (res.ec != std::errc{}) return out;
  }
  for (double& c : v) {
    if (c < 0.0 || c > 1.0) {
      c = std::clamp(c, 0.0, 1.0);
      out.clamped = true;
    }
  }
  if (out.clamped) log_warn("box coordinates clamped to [0,1] in: " + std::string(m[0].str()));
  out.box = {v[0], v[1], v[2], v[3]};
  out.status = (out.box.x1 > out.box.x2 || out.box.y1 > out.box.y2) ? BoxParseStatus::malformed : BoxParseStatus::ok;
  return out;
}

// ---------------------------------------------------------------------------
// Splicing
// ---------------------------------------------------------------------------

/// Replaces the single <ImageHere> token with `n_visual` visual rows.
inline MixedSequence splice_plan(std::span<const std::size_t> prompt, std::size_t n_visual, std::size_t placeholder_id) {
  std::size_t found = 0;
  for (auto id : prompt) found += id == placeholder_id;
  if (found != 1)
    throw SpliceError("prompt must contain exactly one image placeholder, found " + std::to_string(found));
  MixedSequence seq;
  seq.items.reserve(prompt.size() - 1 + n_visual);
  for (auto id : prompt) {
    if (id != placeholder_id) {
      seq.items.push_back(SeqItem::token(id));
      continue;
    }
    for (std::size_t r = 0; r < n_visual; ++r) seq.items.push_back(SeqItem::visual(r));
  }
  return seq;
}

inline MixedSequence splice_plan(std::span<const std::size_t> prompt, std::size_t n_visual, const Vocabulary& vocab) {
  return splice_plan(prompt, n_visual, vocab.image_here_id());
}

}  // namespace padapt
