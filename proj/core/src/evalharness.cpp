// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include "dca/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string_view>
#include <thread>

namespace dca {

int64_t thread_budget() {
  static const int64_t budget = [] {
    const char* env = std::getenv("DCA_THREADS");
    if (!env) return int64_t{1};
    const long long v = std::atoll(env);
    return v < 1 ? int64_t{1} : static_cast<int64_t>(v);
  }();
  return budget;
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int64_t workers = std::min(thread_budget(), n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int64_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 14695981039346656037ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Sample corpus
// ---------------------------------------------------------------------------

namespace {

const char* const kWords[] = {
    "the",     "of",      "and",      "to",      "in",      "that",    "was",     "his",
    "he",      "it",      "with",     "is",      "for",     "as",      "had",     "you",
    "not",     "be",      "her",      "on",      "at",      "by",      "which",   "have",
    "or",      "from",    "this",     "him",     "but",     "all",     "she",     "they",
    "were",    "my",      "are",      "me",      "one",     "their",   "so",      "an",
    "said",    "them",    "we",       "who",     "would",   "been",    "will",    "no",
    "when",    "there",   "if",       "more",    "out",     "up",      "into",    "do",
    "any",     "your",    "what",     "has",     "man",     "could",   "other",   "than",
    "our",     "some",    "very",     "time",    "upon",    "about",   "may",     "its",
    "only",    "now",     "like",     "little",  "then",    "can",     "made",    "should",
    "did",     "us",      "such",     "great",   "before",  "must",    "two",     "these",
    "see",     "know",    "over",     "much",    "down",    "after",   "first",   "mr",
    "good",    "men",     "own",      "never",   "most",    "old",     "shall",   "day",
    "where",   "those",   "came",     "come",    "himself", "way",     "work",    "life",
    "without", "go",      "make",     "well",    "through", "being",   "long",    "say",
    "might",   "how",     "am",       "too",     "even",    "def",     "again",   "many",
    "back",    "here",    "think",    "every",   "people",  "went",    "same",    "last",
    "thought", "away",    "under",    "take",    "found",   "hand",    "eyes",    "still",
    "place",   "while",   "just",     "also",    "young",   "yet",     "though",  "against",
    "things",  "get",     "ever",     "give",    "god",     "years",   "off",     "face",
    "nothing", "right",   "once",     "another", "left",    "part",    "saw",     "house",
    "world",   "head",    "three",    "words",   "put",     "let",     "almost",  "heart",
    "seemed",  "mind",    "far",      "night",   "water",   "asked",   "anything","room",
    "between", "morning", "light",    "quite",   "better",  "side",    "heard",   "took",
};
constexpr int64_t kWordCount = static_cast<int64_t>(sizeof kWords / sizeof kWords[0]);

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Zipf-ish draw over kWords: weight 1/(rank+1), inverse-cdf on a hand-rolled
/// table so the sequence does not depend on library distribution internals.
int64_t draw_word(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = uniform01(rng) * cdf.back();
  return std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
}

}  // namespace

std::vector<uint8_t> make_sample_corpus(int64_t n_bytes, uint64_t seed) {
  if (n_bytes < 0) throw std::invalid_argument("n_bytes must be >= 0");
  std::vector<double> cdf(kWordCount);
  double acc = 0.0;
  for (int64_t i = 0; i < kWordCount; ++i) {
    acc += 1.0 / static_cast<double>(i + 1);
    cdf[i] = acc;
  }

  std::mt19937_64 rng(seed);
  auto gen_sentence = [&] {
    std::string s;
    const int64_t words = 4 + static_cast<int64_t>(rng() % 9);
    for (int64_t w = 0; w < words; ++w) {
      std::string word = kWords[draw_word(rng, cdf)];
      if (w == 0) word[0] = static_cast<char>(std::toupper(word[0]));
      s += word;
      if (w + 1 < words) {
        if (w > 0 && uniform01(rng) < 0.12) s += ',';
        s += ' ';
      }
    }
    const double t = uniform01(rng);
    s += t < 0.85 ? "." : (t < 0.93 ? "?" : "!");
    return s;
  };

  // Each paragraph resamples sentences from a small pool, so the text repeats
  // itself at lags of tens to hundreds of bytes. That long-range structure is
  // what separates the regimes: a model whose long-distance attention works
  // can predict the repeats, one whose positions are out of range cannot.
  std::string text;
  text.reserve(static_cast<size_t>(n_bytes) + 512);
  while (static_cast<int64_t>(text.size()) < n_bytes) {
    const int64_t pool_size = 2 + static_cast<int64_t>(rng() % 3);
    std::vector<std::string> pool(pool_size);
    for (auto& s : pool) s = gen_sentence();
    const int64_t emits = 4 + static_cast<int64_t>(rng() % 5);
    for (int64_t e = 0; e < emits; ++e) {
      text += pool[rng() % static_cast<uint64_t>(pool_size)];
      text += e + 1 < emits ? " " : "";
    }
    text += "\n\n";
  }
  text.resize(static_cast<size_t>(n_bytes));
  return {text.begin(), text.end()};
}

// ---------------------------------------------------------------------------
// Sliding-window perplexity
// ---------------------------------------------------------------------------

ModelScorer::ModelScorer(const ModelCheckpoint& ckpt, AttentionMode mode, const ChunkConfig* cfg)
    : ckpt_(ckpt), mode_(mode) {
  require_valid(ckpt.config);
  if (mode_needs_config(mode)) {
    cfg_ = detail::checked_config(mode, cfg);
    has_cfg_ = true;
  }
}

RowMatrix<float> ModelScorer::logits(std::span<const uint8_t> tokens) const {
  return forward(ckpt_, tokens, mode_, has_cfg_ ? &cfg_ : nullptr);
}

namespace {

double row_nll(const float* row, int64_t vocab, int64_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0.0;
  for (int64_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
  return mx + std::log(sum) - static_cast<double>(row[target]);
}

}  // namespace

PPLResult sliding_window_ppl(const SequenceScorer& scorer, std::span<const uint8_t> tokens,
                             int64_t eval_len, int64_t stride) {
  if (eval_len < 2) throw std::invalid_argument("eval_len must be >= 2");
  if (stride < 1 || stride > eval_len)
    throw std::invalid_argument("stride must be in [1, eval_len]");
  const int64_t len = static_cast<int64_t>(tokens.size());
  if (len < eval_len) throw std::invalid_argument("insufficient tokens: need at least eval_len");

  struct Window {
    int64_t begin, end, scored_from;
  };
  std::vector<Window> windows;
  int64_t prev = 1;
  for (int64_t end = eval_len;; end = std::min(end + stride, len)) {
    windows.push_back({std::max<int64_t>(0, end - 1 - eval_len), end, prev});
    prev = end;
    if (end == len) break;
  }

  std::vector<std::vector<double>> per_window(windows.size());
  parallel_for(static_cast<int64_t>(windows.size()), [&](int64_t wi) {
    const Window& w = windows[wi];
    const RowMatrix<float> lg = scorer.logits(tokens.subspan(w.begin, w.end - w.begin));
    std::vector<double>& out = per_window[wi];
    out.reserve(w.end - w.scored_from);
    for (int64_t t = w.scored_from; t < w.end; ++t)
      out.push_back(row_nll(lg.row(t - 1 - w.begin), lg.cols, tokens[t]));
  });

  PPLResult res;
  double total = 0.0;
  for (const auto& chunk : per_window)
    for (double nll : chunk) {
      res.token_nll.push_back(nll);
      total += nll;
    }
  res.tokens_scored = static_cast<int64_t>(res.token_nll.size());
  res.ppl = std::exp(total / static_cast<double>(res.tokens_scored));
  return res;
}

// ---------------------------------------------------------------------------
// Passkey retrieval
// ---------------------------------------------------------------------------

namespace {

const std::string kPreamble =
    "There is a pass key hidden inside a lot of irrelevant text. Find it and "
    "memorize it. I will quiz you about it later. ";
const std::string kFiller =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. "
    "There and back again. ";
const std::string kKeyPrefix = "The pass key is ";
const std::string kKeySuffix = ". Remember it. ";
const std::string kQuestion = "What is the pass key? The pass key is ";

int64_t count_occurrences(std::span<const uint8_t> hay, const std::string& needle) {
  if (needle.empty()) return 0;
  int64_t n = 0;
  const char* data = reinterpret_cast<const char*>(hay.data());
  std::string_view view(data, hay.size());
  for (size_t pos = view.find(needle); pos != std::string_view::npos;
       pos = view.find(needle, pos + 1))
    ++n;
  return n;
}

}  // namespace

PasskeyCase gen_passkey_case(int64_t total_len, double depth, std::mt19937_64& rng) {
  if (depth < 0.0 || depth > 1.0) throw std::invalid_argument("depth must be in [0, 1]");

  PasskeyCase c;
  c.passkey = std::to_string(10000 + static_cast<int64_t>(rng() % 90000));
  c.expected = c.passkey;
  c.depth = depth;
  c.total_len = total_len;

  const std::string key_sentence = kKeyPrefix + c.passkey + kKeySuffix;
  const int64_t fixed =
      static_cast<int64_t>(kPreamble.size() + key_sentence.size() + kQuestion.size());
  if (total_len < fixed)
    throw std::invalid_argument("total_len too small: need at least " + std::to_string(fixed));

  const int64_t budget = total_len - fixed;
  const int64_t full = budget / static_cast<int64_t>(kFiller.size());
  const int64_t rem = budget % static_cast<int64_t>(kFiller.size());
  const int64_t before = static_cast<int64_t>(std::llround(depth * static_cast<double>(full)));
  const int64_t after = full - before;

  std::string prompt;
  prompt.reserve(static_cast<size_t>(total_len));
  prompt += kPreamble;
  // The partial-sentence pad keeps the exact length without separating the
  // key from the preamble at depth 0 or from the question at depth 1.
  if (depth > 0.0) prompt += kFiller.substr(0, static_cast<size_t>(rem));
  for (int64_t i = 0; i < before; ++i) prompt += kFiller;
  prompt += key_sentence;
  if (depth == 0.0) prompt += kFiller.substr(0, static_cast<size_t>(rem));
  for (int64_t i = 0; i < after; ++i) prompt += kFiller;
  prompt += kQuestion;

  c.prompt.assign(prompt.begin(), prompt.end());
  if (static_cast<int64_t>(c.prompt.size()) != total_len)
    throw std::logic_error("passkey prompt length drifted");
  if (count_occurrences(c.prompt, c.passkey) != 1)
    throw std::logic_error("passkey must appear exactly once");
  return c;
}

ModelGenerator::ModelGenerator(const ModelCheckpoint& ckpt, AttentionMode mode,
                               const ChunkConfig* cfg)
    : ckpt_(ckpt), mode_(mode) {
  require_valid(ckpt.config);
  if (mode_needs_config(mode)) {
    cfg_ = detail::checked_config(mode, cfg);
    has_cfg_ = true;
  }
}

std::vector<uint8_t> ModelGenerator::generate(std::span<const uint8_t> prompt, int64_t count) {
  DecodeSession session(ckpt_, mode_, has_cfg_ ? &cfg_ : nullptr);
  session.prefill(prompt);
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(session.greedy_step());
  return out;
}

std::vector<uint8_t> CopyOracleGenerator::generate(std::span<const uint8_t> prompt,
                                                   int64_t count) {
  auto is_digit = [](uint8_t b) { return b >= '0' && b <= '9'; };
  for (size_t i = 0; i + 5 <= prompt.size(); ++i) {
    bool run = true;
    for (size_t j = 0; j < 5; ++j) run = run && is_digit(prompt[i + j]);
    if (run) {
      std::vector<uint8_t> out(prompt.begin() + i, prompt.begin() + i + 5);
      while (static_cast<int64_t>(out.size()) < count) out.push_back(' ');
      out.resize(static_cast<size_t>(count));
      return out;
    }
  }
  return std::vector<uint8_t>(static_cast<size_t>(count), ' ');
}

std::vector<uint8_t> ConstantGenerator::generate(std::span<const uint8_t>, int64_t count) {
  return std::vector<uint8_t>(static_cast<size_t>(count), byte_);
}

PasskeyReport passkey_accuracy(TokenGenerator& gen, std::span<const PasskeyCase> cases) {
  if (cases.empty()) throw std::invalid_argument("cases must be nonempty");
  std::vector<uint8_t> hit(cases.size(), 0);
  parallel_for(static_cast<int64_t>(cases.size()), [&](int64_t i) {
    const PasskeyCase& c = cases[i];
    const std::vector<uint8_t> out =
        gen.generate(c.prompt, static_cast<int64_t>(c.expected.size()));
    hit[i] = std::equal(out.begin(), out.end(), c.expected.begin(), c.expected.end(),
                        [](uint8_t a, char b) { return a == static_cast<uint8_t>(b); })
                 ? 1
                 : 0;
  });

  PasskeyReport rep;
  int64_t total_hits = 0;
  for (size_t i = 0; i < cases.size(); ++i) {
    const PasskeyCase& c = cases[i];
    auto it = std::find_if(rep.cells.begin(), rep.cells.end(), [&](const PasskeyCell& cell) {
      return cell.total_len == c.total_len && cell.depth == c.depth;
    });
    if (it == rep.cells.end()) {
      rep.cells.push_back({c.total_len, c.depth, 0, 0});
      it = rep.cells.end() - 1;
    }
    it->trials += 1;
    it->hits += hit[i];
    total_hits += hit[i];
  }
  rep.overall = static_cast<double>(total_hits) / static_cast<double>(cases.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

std::vector<AblationRow> ablation_run(const ModelCheckpoint& ckpt,
                                      std::span<const uint8_t> eval_tokens,
                                      std::span<const int64_t> lengths, const ChunkConfig& cfg,
                                      int64_t stride, int64_t passkey_trials, uint64_t seed) {
  require_valid(cfg);
  std::vector<AblationRow> rows;
  for (AttentionMode mode :
       {AttentionMode::IntraOnly, AttentionMode::IntraInter, AttentionMode::FullDCA}) {
    const ModelScorer scorer(ckpt, mode, &cfg);
    for (int64_t length : lengths) {
      AblationRow row;
      row.mode = mode;
      row.length = length;
      row.ppl = sliding_window_ppl(scorer, eval_tokens, length,
                                   std::min<int64_t>(stride, length))
                    .ppl;
      if (passkey_trials > 0) {
        std::mt19937_64 rng(seed ^ static_cast<uint64_t>(length));
        std::vector<PasskeyCase> cases;
        for (double depth : {0.0, 0.5, 1.0})
          for (int64_t t = 0; t < passkey_trials; ++t)
            cases.push_back(gen_passkey_case(length, depth, rng));
        ModelGenerator gen(ckpt, mode, &cfg);
        row.passkey = passkey_accuracy(gen, cases).overall;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

void write_csv(const std::string& path, const std::string& config_comment,
               const std::string& header, std::span<const std::string> rows) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f << "# " << config_comment << "\n" << header << "\n";
    for (const std::string& row : rows) f << row << "\n";
    if (!f) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_ppl_csv(const std::string& path, const std::string& config_comment,
                   std::span<const PPLCsvRow> rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const PPLCsvRow& r : rows)
    lines.push_back(r.mode + "," + std::to_string(r.length) + "," + fmt_double(r.ppl));
  write_csv(path, config_comment, "mode,length,ppl", lines);
}

void write_passkey_csv(const std::string& path, const std::string& config_comment,
                       std::span<const PasskeyCsvRow> rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const PasskeyCsvRow& r : rows)
    lines.push_back(r.mode + "," + std::to_string(r.length) + "," + fmt_double(r.depth) + "," +
                    fmt_double(r.accuracy));
  write_csv(path, config_comment, "mode,length,depth,accuracy", lines);
}

void write_ablation_csv(const std::string& path, const std::string& config_comment,
                        std::span<const AblationRow> rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size());
  for (const AblationRow& r : rows) {
    std::string line = std::string(mode_name(r.mode)) + "," + std::to_string(r.length) + "," +
                       fmt_double(r.ppl) + ",";
    if (r.passkey) line += fmt_double(*r.passkey);
    lines.push_back(line);
  }
  write_csv(path, config_comment, "mode,length,ppl,passkey", lines);
}

}  // namespace dca
