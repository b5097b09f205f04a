// Copyright 2026 the dca authors
// SPDX-License-Identifier: Apache-2.0

#include <cctype>
#include <charconv>
#include <chrono>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>

#include "dca/attention.hpp"
#include "dca/evalharness.hpp"
#include "dca/schedules.hpp"
#include "dca/toy_model.hpp"

namespace {

using dca::AttentionMode;
using dca::ChunkConfig;

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("read failed on " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Config file: flat key=value, merged under the command line
// ---------------------------------------------------------------------------

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

/// Every key any subcommand understands; keys are long option names without
/// the dashes. A key outside this set is a typo and rejected up front; a key
/// the running subcommand does not use is ignored so one file can serve
/// several subcommands.
const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "corpus", "out",    "steps",  "batch",   "seq-len",       "lr",     "warmup",
      "clip",   "log-every", "model-dim", "heads", "layers", "train-context",
      "seed",   "ckpt",   "modes",  "lengths", "stride",        "tail",   "chunk",
      "ctx",    "window", "out-dir", "depths", "trials",        "passkey-trials",
      "len",    "mode",   "bytes"};
  return keys;
}

int64_t config_int(const std::string& val, const std::string& key) {
  int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(val.data(), val.data() + val.size(), out);
  if (ec != std::errc{} || ptr != val.data() + val.size())
    throw CLI::ValidationError("config key '" + key + "': not an integer: " + val);
  return out;
}

uint64_t config_uint(const std::string& val, const std::string& key) {
  uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(val.data(), val.data() + val.size(), out);
  if (ec != std::errc{} || ptr != val.data() + val.size())
    throw CLI::ValidationError("config key '" + key + "': not an unsigned integer: " + val);
  return out;
}

double config_double(const std::string& val, const std::string& key) {
  try {
    size_t idx = 0;
    const double out = std::stod(val, &idx);
    if (idx != val.size()) throw std::invalid_argument(val);
    return out;
  } catch (const std::exception&) {
    throw CLI::ValidationError("config key '" + key + "': not a number: " + val);
  }
}

void assign_config(const std::string& val, const std::string& key, int64_t& out) {
  out = config_int(val, key);
}
void assign_config(const std::string& val, const std::string& key, uint64_t& out) {
  out = config_uint(val, key);
}
void assign_config(const std::string& val, const std::string& key, double& out) {
  out = config_double(val, key);
}
void assign_config(const std::string& val, const std::string&, std::string& out) { out = val; }

template <typename T>
void assign_config(const std::string& val, const std::string& key, std::vector<T>& out) {
  std::vector<T> parsed;
  size_t begin = 0;
  while (begin <= val.size()) {
    size_t end = val.find(',', begin);
    if (end == std::string::npos) end = val.size();
    const std::string piece{trim(std::string_view(val).substr(begin, end - begin))};
    if (piece.empty()) throw CLI::ValidationError("config key '" + key + "': empty list entry");
    T item{};
    assign_config(piece, key, item);
    parsed.push_back(std::move(item));
    begin = end + 1;
  }
  out = std::move(parsed);
}

/// key=value lines, '#' comments and blank lines skipped, later lines win.
/// apply() copies a value onto its target unless the same option was given on
/// the command line: flags beat config beats built-in defaults.
class ConfigFile {
 public:
  ConfigFile() = default;

  explicit ConfigFile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("--config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string_view body = trim(line);
      if (body.empty() || body.front() == '#') continue;
      const size_t eq = body.find('=');
      if (eq == std::string_view::npos)
        throw CLI::ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
      const std::string key{trim(body.substr(0, eq))};
      const std::string val{trim(body.substr(eq + 1))};
      if (!known_config_keys().count(key))
        throw CLI::ValidationError(path + ":" + std::to_string(lineno) + ": unknown config key '" +
                                   key + "'");
      kv_[key] = val;
    }
  }

  template <typename T>
  void apply(const CLI::App& sub, const std::string& flag, T& target) const {
    const std::string key = flag.substr(2);
    const auto it = kv_.find(key);
    if (it == kv_.end()) return;
    if (sub.count(flag) > 0) return;
    assign_config(it->second, key, target);
  }

 private:
  std::map<std::string, std::string> kv_;
};

/// Usage check shared by every path option: present, and pointing at a file.
void require_input_file(const std::string& path, const std::string& flag) {
  if (path.empty()) throw CLI::ValidationError(flag + " is required");
  if (!std::filesystem::is_regular_file(path))
    throw CLI::ValidationError(flag + ": file does not exist: " + path);
}

// ---------------------------------------------------------------------------
// Shared argument plumbing
// ---------------------------------------------------------------------------

/// Chunk parameters shared by the evaluation subcommands. Zero / negative
/// sentinels mean "derive from the model": c defaults to the checkpoint's
/// train_context, s to 3c/4 and w to c - s.
struct ChunkFlags {
  int64_t chunk_size = 0;
  int64_t ctx = 0;
  int64_t window = -1;
};

void add_chunk_flags(CLI::App* sub, ChunkFlags& f) {
  sub->add_option("-s,--chunk", f.chunk_size, "chunk size s (0: 3c/4)")->capture_default_str();
  sub->add_option("-c,--ctx", f.ctx, "pretraining context c (0: model train_context)")
      ->capture_default_str();
  sub->add_option("-w,--window", f.window, "local window w (-1: c - s)")->capture_default_str();
}

void apply_chunk_config(const CLI::App& sub, const ConfigFile& cfg, ChunkFlags& f) {
  cfg.apply(sub, "--chunk", f.chunk_size);
  cfg.apply(sub, "--ctx", f.ctx);
  cfg.apply(sub, "--window", f.window);
}

ChunkConfig resolve_chunk(const ChunkFlags& f, int64_t model_ctx) {
  ChunkConfig cfg;
  cfg.pretrain_ctx = f.ctx > 0 ? f.ctx : model_ctx;
  cfg.chunk_size = f.chunk_size > 0 ? f.chunk_size : 3 * cfg.pretrain_ctx / 4;
  cfg.local_window =
      f.window >= 0 ? f.window : dca::default_window(cfg.chunk_size, cfg.pretrain_ctx);
  dca::require_valid(cfg);
  return cfg;
}

std::string chunk_comment(const ChunkConfig& cfg) {
  std::ostringstream os;
  os << "s=" << cfg.chunk_size << " c=" << cfg.pretrain_ctx << " w=" << cfg.local_window;
  return os.str();
}

std::vector<AttentionMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<AttentionMode> modes;
  for (const auto& name : names) {
    auto mode = dca::parse_mode(name);
    if (!mode)
      throw CLI::ValidationError("--modes: unknown mode '" + name +
                                 "' (valid: " + dca::valid_mode_names() + ")");
    modes.push_back(*mode);
  }
  return modes;
}

template <typename T>
std::string join(const std::vector<T>& xs, char sep = ',') {
  std::ostringstream os;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) os << sep;
    os << xs[i];
  }
  return os.str();
}

std::vector<uint8_t> load_eval_tokens(const std::string& path, int64_t tail) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  if (tail > 0 && tail < static_cast<int64_t>(bytes.size()))
    bytes.erase(bytes.begin(), bytes.end() - tail);
  return bytes;
}

/// Resolve the CSV path for an evaluation subcommand, creating --out-dir on
/// first use so results land somewhere even for fresh directories.
std::string csv_path(const std::string& out_dir, const char* filename) {
  std::filesystem::create_directories(out_dir);
  return (std::filesystem::path(out_dir) / filename).string();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string out = "model.ckpt";
  dca::ModelConfig model;
  dca::TrainOptions opts;
};

void run_train(const CLI::App& sub, const ConfigFile& cfg, TrainArgs& a) {
  cfg.apply(sub, "--corpus", a.corpus);
  cfg.apply(sub, "--out", a.out);
  cfg.apply(sub, "--steps", a.opts.steps);
  cfg.apply(sub, "--batch", a.opts.batch);
  cfg.apply(sub, "--seq-len", a.opts.seq_len);
  cfg.apply(sub, "--lr", a.opts.lr);
  cfg.apply(sub, "--warmup", a.opts.warmup_steps);
  cfg.apply(sub, "--clip", a.opts.clip_norm);
  cfg.apply(sub, "--log-every", a.opts.log_every);
  cfg.apply(sub, "--model-dim", a.model.model_dim);
  cfg.apply(sub, "--heads", a.model.heads);
  cfg.apply(sub, "--layers", a.model.layers);
  cfg.apply(sub, "--train-context", a.model.train_context);
  cfg.apply(sub, "--seed", a.model.seed);
  require_input_file(a.corpus, "--corpus");
  if (a.out.empty()) throw CLI::ValidationError("--out is required");

  std::vector<uint8_t> corpus = read_file_bytes(a.corpus);
  std::fprintf(stderr, "corpus %s: %zu bytes, fingerprint %016" PRIx64 "\n", a.corpus.c_str(),
               corpus.size(), dca::fnv1a64(corpus));

  dca::ModelCheckpoint ckpt = dca::init_model(a.model);
  ckpt.corpus_fingerprint = dca::fnv1a64(corpus);
  std::fprintf(stderr,
               "model: %" PRId64 " params (d=%" PRId64 " heads=%" PRId64 " layers=%" PRId64
               " ctx=%" PRId64 " seed=%" PRIu64 ")\n",
               dca::parameter_count(a.model), a.model.model_dim, a.model.heads, a.model.layers,
               a.model.train_context, a.model.seed);

  const auto t0 = std::chrono::steady_clock::now();
  ckpt = dca::train(ckpt, corpus, a.opts, [](int64_t step, double loss) {
    std::printf("step %6" PRId64 "  loss %.4f\n", step, loss);
    std::fflush(stdout);
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  dca::save_checkpoint(ckpt, a.out);
  std::printf("wrote %s after %" PRId64 " steps in %.1f s\n", a.out.c_str(), ckpt.step_count,
              secs);
}

// ---------------------------------------------------------------------------
// eval-ppl
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string corpus;
  std::vector<std::string> modes = {"vanilla", "dca"};
  std::vector<int64_t> lengths = {128, 512};
  int64_t stride = 0;  // 0: length / 4 per length
  int64_t tail = 0;    // 0: whole file, else last N bytes
  ChunkFlags chunk;
  std::string out_dir = ".";
};

int64_t stride_for(int64_t stride_flag, int64_t length) {
  if (stride_flag > 0) return std::min(stride_flag, length);
  return std::max<int64_t>(1, length / 4);
}

void run_eval_ppl(const CLI::App& sub, const ConfigFile& cfgfile, EvalArgs& a) {
  cfgfile.apply(sub, "--ckpt", a.ckpt);
  cfgfile.apply(sub, "--corpus", a.corpus);
  cfgfile.apply(sub, "--modes", a.modes);
  cfgfile.apply(sub, "--lengths", a.lengths);
  cfgfile.apply(sub, "--stride", a.stride);
  cfgfile.apply(sub, "--tail", a.tail);
  cfgfile.apply(sub, "--out-dir", a.out_dir);
  apply_chunk_config(sub, cfgfile, a.chunk);
  require_input_file(a.ckpt, "--ckpt");
  require_input_file(a.corpus, "--corpus");
  const std::vector<AttentionMode> modes = parse_modes(a.modes);

  const dca::ModelCheckpoint ckpt = dca::load_checkpoint(a.ckpt);
  const std::vector<uint8_t> tokens = load_eval_tokens(a.corpus, a.tail);
  const ChunkConfig cfg = resolve_chunk(a.chunk, ckpt.config.train_context);

  std::vector<dca::PPLCsvRow> rows;
  for (AttentionMode mode : modes) {
    const ChunkConfig* cfg_ptr = dca::mode_needs_config(mode) ? &cfg : nullptr;
    dca::ModelScorer scorer(ckpt, mode, cfg_ptr);
    for (int64_t length : a.lengths) {
      const int64_t stride = stride_for(a.stride, length);
      dca::PPLResult r = dca::sliding_window_ppl(scorer, tokens, length, stride);
      rows.push_back({std::string(dca::mode_name(mode)), length, r.ppl});
      std::printf("mode=%s length=%" PRId64 " stride=%" PRId64 " tokens=%" PRId64 " ppl=%.4f\n",
                  std::string(dca::mode_name(mode)).c_str(), length, stride, r.tokens_scored,
                  r.ppl);
      std::fflush(stdout);
    }
  }

  std::ostringstream comment;
  comment << "eval-ppl ckpt=" << a.ckpt << " corpus=" << a.corpus << " tail=" << a.tail
          << " modes=" << join(a.modes) << " lengths=" << join(a.lengths)
          << " stride=" << a.stride << " " << chunk_comment(cfg);
  const std::string path = csv_path(a.out_dir, "ppl.csv");
  dca::write_ppl_csv(path, comment.str(), rows);
  std::printf("wrote %s (%zu rows)\n", path.c_str(), rows.size());
}

// ---------------------------------------------------------------------------
// passkey
// ---------------------------------------------------------------------------

struct PasskeyArgs {
  std::string ckpt;
  std::vector<std::string> modes = {"vanilla", "dca"};
  std::vector<int64_t> lengths = {256, 512};
  std::vector<double> depths = {0.0, 0.5, 1.0};
  int64_t trials = 20;
  uint64_t seed = 42;
  ChunkFlags chunk;
  std::string out_dir = ".";
};

void run_passkey(const CLI::App& sub, const ConfigFile& cfgfile, PasskeyArgs& a) {
  cfgfile.apply(sub, "--ckpt", a.ckpt);
  cfgfile.apply(sub, "--modes", a.modes);
  cfgfile.apply(sub, "--lengths", a.lengths);
  cfgfile.apply(sub, "--depths", a.depths);
  cfgfile.apply(sub, "--trials", a.trials);
  cfgfile.apply(sub, "--seed", a.seed);
  cfgfile.apply(sub, "--out-dir", a.out_dir);
  apply_chunk_config(sub, cfgfile, a.chunk);
  require_input_file(a.ckpt, "--ckpt");
  if (a.trials < 1) throw CLI::ValidationError("--trials must be >= 1");
  const std::vector<AttentionMode> modes = parse_modes(a.modes);

  const dca::ModelCheckpoint ckpt = dca::load_checkpoint(a.ckpt);
  const ChunkConfig cfg = resolve_chunk(a.chunk, ckpt.config.train_context);

  // One case list shared by every mode so the comparison is paired. The rng
  // is reseeded per grid cell, making the grid independent of cell order.
  std::vector<dca::PasskeyCase> cases;
  for (size_t li = 0; li < a.lengths.size(); ++li) {
    for (size_t di = 0; di < a.depths.size(); ++di) {
      std::mt19937_64 rng(a.seed * 1000003ULL + li * 131ULL + di);
      for (int64_t t = 0; t < a.trials; ++t)
        cases.push_back(dca::gen_passkey_case(a.lengths[li], a.depths[di], rng));
    }
  }

  std::vector<dca::PasskeyCsvRow> rows;
  for (AttentionMode mode : modes) {
    const ChunkConfig* cfg_ptr = dca::mode_needs_config(mode) ? &cfg : nullptr;
    dca::ModelGenerator gen(ckpt, mode, cfg_ptr);
    dca::PasskeyReport report = dca::passkey_accuracy(gen, cases);
    for (const auto& cell : report.cells) {
      rows.push_back(
          {std::string(dca::mode_name(mode)), cell.total_len, cell.depth, cell.accuracy()});
      std::printf("mode=%s length=%" PRId64 " depth=%.2f accuracy=%.3f (%" PRId64 "/%" PRId64
                  ")\n",
                  std::string(dca::mode_name(mode)).c_str(), cell.total_len, cell.depth,
                  cell.accuracy(), cell.hits, cell.trials);
    }
    std::printf("mode=%s overall=%.3f\n", std::string(dca::mode_name(mode)).c_str(),
                report.overall);
    std::fflush(stdout);
  }

  std::ostringstream comment;
  comment << "passkey ckpt=" << a.ckpt << " modes=" << join(a.modes)
          << " lengths=" << join(a.lengths) << " depths=" << join(a.depths)
          << " trials=" << a.trials << " seed=" << a.seed << " " << chunk_comment(cfg);
  const std::string path = csv_path(a.out_dir, "passkey.csv");
  dca::write_passkey_csv(path, comment.str(), rows);
  std::printf("wrote %s (%zu rows)\n", path.c_str(), rows.size());
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string ckpt;
  std::string corpus;
  std::vector<int64_t> lengths = {128, 256, 512};
  int64_t stride = 32;
  int64_t passkey_trials = 2;
  int64_t tail = 0;
  uint64_t seed = 42;
  ChunkFlags chunk;
  std::string out_dir = ".";
};

void run_ablate(const CLI::App& sub, const ConfigFile& cfgfile, AblateArgs& a) {
  cfgfile.apply(sub, "--ckpt", a.ckpt);
  cfgfile.apply(sub, "--corpus", a.corpus);
  cfgfile.apply(sub, "--lengths", a.lengths);
  cfgfile.apply(sub, "--stride", a.stride);
  cfgfile.apply(sub, "--passkey-trials", a.passkey_trials);
  cfgfile.apply(sub, "--tail", a.tail);
  cfgfile.apply(sub, "--seed", a.seed);
  cfgfile.apply(sub, "--out-dir", a.out_dir);
  apply_chunk_config(sub, cfgfile, a.chunk);
  require_input_file(a.ckpt, "--ckpt");
  require_input_file(a.corpus, "--corpus");

  const dca::ModelCheckpoint ckpt = dca::load_checkpoint(a.ckpt);
  const std::vector<uint8_t> tokens = load_eval_tokens(a.corpus, a.tail);
  const ChunkConfig cfg = resolve_chunk(a.chunk, ckpt.config.train_context);

  std::vector<dca::AblationRow> rows =
      dca::ablation_run(ckpt, tokens, a.lengths, cfg, a.stride, a.passkey_trials, a.seed);
  for (const auto& row : rows) {
    if (row.passkey)
      std::printf("mode=%s length=%" PRId64 " ppl=%.4f passkey=%.3f\n",
                  std::string(dca::mode_name(row.mode)).c_str(), row.length, row.ppl,
                  *row.passkey);
    else
      std::printf("mode=%s length=%" PRId64 " ppl=%.4f\n",
                  std::string(dca::mode_name(row.mode)).c_str(), row.length, row.ppl);
  }
  std::fflush(stdout);

  std::ostringstream comment;
  comment << "ablate ckpt=" << a.ckpt << " corpus=" << a.corpus << " tail=" << a.tail
          << " lengths=" << join(a.lengths) << " stride=" << a.stride
          << " passkey-trials=" << a.passkey_trials << " seed=" << a.seed << " "
          << chunk_comment(cfg);
  const std::string path = csv_path(a.out_dir, "ablation.csv");
  dca::write_ablation_csv(path, comment.str(), rows);
  std::printf("wrote %s (%zu rows)\n", path.c_str(), rows.size());
}

// ---------------------------------------------------------------------------
// matrix
// ---------------------------------------------------------------------------

struct MatrixArgs {
  int64_t len = 0;
  std::string mode = "dca";
  ChunkFlags chunk;
};

void print_matrix_row(const std::vector<std::string>& fields) {
  std::string line;
  for (size_t j = 0; j < fields.size(); ++j) {
    if (j) line += '\t';
    line += fields[j];
  }
  line += '\n';
  std::fputs(line.c_str(), stdout);
}

void run_matrix(const CLI::App& sub, const ConfigFile& cfgfile, MatrixArgs& a) {
  cfgfile.apply(sub, "--len", a.len);
  cfgfile.apply(sub, "--mode", a.mode);
  apply_chunk_config(sub, cfgfile, a.chunk);
  if (a.len < 1) throw CLI::ValidationError("--len must be >= 1");

  std::vector<std::vector<std::string>> table(
      static_cast<size_t>(a.len), std::vector<std::string>(static_cast<size_t>(a.len)));
  if (a.mode == "dca") {
    if (a.chunk.ctx <= 0) throw CLI::ValidationError("--ctx is required for --mode dca");
    const ChunkConfig cfg = resolve_chunk(a.chunk, a.chunk.ctx);
    dca::RelPosMatrix m = dca::relative_position_matrix(a.len, cfg);
    for (int64_t i = 0; i < a.len; ++i)
      for (int64_t j = 0; j <= i; ++j) table[i][j] = std::to_string(m.at(i, j));
  } else if (a.mode == "rope") {
    for (int64_t i = 0; i < a.len; ++i)
      for (int64_t j = 0; j <= i; ++j) table[i][j] = std::to_string(i - j);
  } else if (a.mode == "pi") {
    if (a.chunk.ctx <= 0) throw CLI::ValidationError("--ctx is required for --mode pi");
    const double factor = static_cast<double>(dca::pi_scale_factor(a.len, a.chunk.ctx));
    char buf[32];
    for (int64_t i = 0; i < a.len; ++i)
      for (int64_t j = 0; j <= i; ++j) {
        std::snprintf(buf, sizeof buf, "%g", static_cast<double>(i - j) / factor);
        table[i][j] = buf;
      }
  } else {
    throw CLI::ValidationError("--mode must be one of dca, rope, pi");
  }

  for (const auto& row : table) print_matrix_row(row);
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

struct GenCorpusArgs {
  std::string out;
  int64_t bytes = 1 << 20;
  uint64_t seed = 7;
};

void run_gen_corpus(const CLI::App& sub, const ConfigFile& cfgfile, GenCorpusArgs& a) {
  cfgfile.apply(sub, "--out", a.out);
  cfgfile.apply(sub, "--bytes", a.bytes);
  cfgfile.apply(sub, "--seed", a.seed);
  if (a.out.empty()) throw CLI::ValidationError("--out is required");
  if (a.bytes < 1) throw CLI::ValidationError("--bytes must be >= 1");

  std::vector<uint8_t> corpus = dca::make_sample_corpus(a.bytes, a.seed);
  write_file_bytes(a.out, corpus);
  std::printf("wrote %s: %zu bytes, fingerprint %016" PRIx64 "\n", a.out.c_str(), corpus.size(),
              dca::fnv1a64(corpus));
}

/// Rejects unknown mode names at parse time, before any file is touched.
const CLI::Validator kModeValidator(
    [](std::string& name) -> std::string {
      if (dca::parse_mode(name)) return {};
      return "unknown mode '" + name + "' (valid: " + dca::valid_mode_names() + ")";
    },
    "MODE");

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual chunk attention toy-model experiments"};
  app.set_version_flag("--version", "dca 0.1.0");
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "key=value config file; flags override it")
      ->check(CLI::ExistingFile);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train the byte-level toy model");
  train->add_option("--corpus", train_args.corpus, "training corpus (raw bytes)");
  train->add_option("--out", train_args.out, "checkpoint output path")->capture_default_str();
  train->add_option("--steps", train_args.opts.steps, "optimizer steps")->capture_default_str();
  train->add_option("--batch", train_args.opts.batch, "windows per step")->capture_default_str();
  train->add_option("--seq-len", train_args.opts.seq_len, "training window (0: train-context)")
      ->capture_default_str();
  train->add_option("--lr", train_args.opts.lr, "peak learning rate")->capture_default_str();
  train->add_option("--warmup", train_args.opts.warmup_steps, "linear warmup steps")
      ->capture_default_str();
  train->add_option("--clip", train_args.opts.clip_norm, "global gradient-norm clip")
      ->capture_default_str();
  train->add_option("--log-every", train_args.opts.log_every, "steps between loss lines")
      ->capture_default_str();
  train->add_option("--model-dim", train_args.model.model_dim, "model width")
      ->capture_default_str();
  train->add_option("--heads", train_args.model.heads, "attention heads")->capture_default_str();
  train->add_option("--layers", train_args.model.layers, "transformer blocks")
      ->capture_default_str();
  train->add_option("--train-context", train_args.model.train_context, "training context length")
      ->capture_default_str();
  train->add_option("--seed", train_args.model.seed, "init + batch sampling seed")
      ->capture_default_str();

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval-ppl", "sliding-window perplexity per mode and length");
  eval->add_option("--ckpt", eval_args.ckpt, "model checkpoint");
  eval->add_option("--corpus", eval_args.corpus, "evaluation corpus (raw bytes)");
  eval->add_option("--modes", eval_args.modes, "attention modes, comma separated")
      ->delimiter(',')
      ->check(kModeValidator)
      ->capture_default_str();
  eval->add_option("--lengths", eval_args.lengths, "evaluation context lengths")
      ->delimiter(',')
      ->capture_default_str();
  eval->add_option("--stride", eval_args.stride, "window stride (0: length/4)")
      ->capture_default_str();
  eval->add_option("--tail", eval_args.tail, "evaluate only the last N corpus bytes (0: all)")
      ->capture_default_str();
  add_chunk_flags(eval, eval_args.chunk);
  eval->add_option("--out-dir", eval_args.out_dir, "directory for ppl.csv")
      ->capture_default_str();

  PasskeyArgs pass_args;
  auto* pass = app.add_subcommand("passkey", "passkey retrieval accuracy grid");
  pass->add_option("--ckpt", pass_args.ckpt, "model checkpoint");
  pass->add_option("--modes", pass_args.modes, "attention modes, comma separated")
      ->delimiter(',')
      ->check(kModeValidator)
      ->capture_default_str();
  pass->add_option("--lengths", pass_args.lengths, "prompt lengths")
      ->delimiter(',')
      ->capture_default_str();
  pass->add_option("--depths", pass_args.depths, "placement depths in [0,1]")
      ->delimiter(',')
      ->capture_default_str();
  pass->add_option("--trials", pass_args.trials, "cases per (length, depth) cell")
      ->capture_default_str();
  pass->add_option("--seed", pass_args.seed, "case generation seed")->capture_default_str();
  add_chunk_flags(pass, pass_args.chunk);
  pass->add_option("--out-dir", pass_args.out_dir, "directory for passkey.csv")
      ->capture_default_str();

  AblateArgs abl_args;
  auto* abl = app.add_subcommand("ablate", "intra / intra+inter / full dca ablation table");
  abl->add_option("--ckpt", abl_args.ckpt, "model checkpoint");
  abl->add_option("--corpus", abl_args.corpus, "evaluation corpus (raw bytes)");
  abl->add_option("--lengths", abl_args.lengths, "evaluation context lengths")
      ->delimiter(',')
      ->capture_default_str();
  abl->add_option("--stride", abl_args.stride, "window stride (capped at length)")
      ->capture_default_str();
  abl->add_option("--passkey-trials", abl_args.passkey_trials,
                  "passkey cases per depth (0: skip passkey column)")
      ->capture_default_str();
  abl->add_option("--tail", abl_args.tail, "evaluate only the last N corpus bytes (0: all)")
      ->capture_default_str();
  abl->add_option("--seed", abl_args.seed, "passkey case seed")->capture_default_str();
  add_chunk_flags(abl, abl_args.chunk);
  abl->add_option("--out-dir", abl_args.out_dir, "directory for ablation.csv")
      ->capture_default_str();

  MatrixArgs mat_args;
  auto* mat = app.add_subcommand("matrix", "print the relative-position matrix");
  mat->add_option("--len", mat_args.len, "sequence length");
  mat->add_option("--mode", mat_args.mode, "dca, rope or pi")->capture_default_str();
  add_chunk_flags(mat, mat_args.chunk);

  GenCorpusArgs gen_args;
  auto* gen = app.add_subcommand("gen-corpus", "write the built-in deterministic sample corpus");
  gen->add_option("--out", gen_args.out, "output path");
  gen->add_option("--bytes", gen_args.bytes, "corpus size in bytes")->capture_default_str();
  gen->add_option("--seed", gen_args.seed, "corpus seed")->capture_default_str();

  try {
    app.parse(argc, argv);
    const ConfigFile cfg = config_path.empty() ? ConfigFile{} : ConfigFile{config_path};
    if (train->parsed()) run_train(*train, cfg, train_args);
    if (eval->parsed()) run_eval_ppl(*eval, cfg, eval_args);
    if (pass->parsed()) run_passkey(*pass, cfg, pass_args);
    if (abl->parsed()) run_ablate(*abl, cfg, abl_args);
    if (mat->parsed()) run_matrix(*mat, cfg, mat_args);
    if (gen->parsed()) run_gen_corpus(*gen, cfg, gen_args);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
