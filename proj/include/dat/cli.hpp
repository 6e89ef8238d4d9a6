#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dat/backbone.hpp"
#include "dat/checkpoint.hpp"
#include "dat/cost.hpp"
#include "dat/gradcheck_suite.hpp"
#include "dat/importance.hpp"
#include "dat/train.hpp"

namespace dat::cli {

enum ExitCode { kOk = 0, kCheckFailed = 1, kUsage = 2 };

struct RunConfig {
  std::string command;
  std::string preset = "dat-nano";
  ModelConfig model = preset_nano();
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string input;
  std::string out;
  std::vector<std::string> queries;  // "row,col" in input pixels
  std::size_t steps = 200;
  double lr = 1e-3;
  std::size_t images = 32;
  std::string corrupt;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || v.front() == '-') throw ArgumentError(key + ": '" + v + "' is not a non-negative integer");
  return static_cast<std::size_t>(n);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ArgumentError(key + ": '" + v + "' is not a number");
  return d;
}

inline std::array<std::size_t, kNumStages> parse_stages(const std::string& key, const std::string& v) {
  std::array<std::size_t, kNumStages> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == kNumStages) throw ArgumentError(key + ": expected " + std::to_string(kNumStages) + " comma-separated values");
    out[i++] = parse_size(key, trim(item));
  }
  if (i != kNumStages) throw ArgumentError(key + ": expected " + std::to_string(kNumStages) + " comma-separated values");
  return out;
}

inline std::string join_stages(const ModelConfig& m, std::size_t StageConfig::*field) {
  std::string s;
  for (std::size_t i = 0; i < kNumStages; ++i) s += (i ? "," : "") + std::to_string(m.stages[i].*field);
  return s;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const std::map<std::string, std::size_t StageConfig::*>& stage_keys() {
  static const std::map<std::string, std::size_t StageConfig::*> keys{
      {"pairs", &StageConfig::pairs},          {"channels", &StageConfig::channels},
      {"strides", &StageConfig::stride},       {"heads", &StageConfig::heads},
      {"groups", &StageConfig::groups},        {"local_kernels", &StageConfig::local_kernel},
      {"offset_kernels", &StageConfig::offset_kernel}};
  return keys;
}

}  // namespace detail

// Applies one `key = value` setting. Model keys edit the current model config; `preset`
// replaces it wholesale.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "preset") {
    auto p = find_preset(value);
    if (!p) throw ConfigError("unknown preset '" + value + "'");
    rc.preset = value;
    rc.model = *p;
  } else if (key == "seed") {
    rc.seed = parse_size(key, value);
  } else if (key == "res") {
    rc.model.resolution = parse_size(key, value);
  } else if (key == "checkpoint") {
    rc.checkpoint = value;
  } else if (key == "input") {
    rc.input = value;
  } else if (key == "out") {
    rc.out = value;
  } else if (key == "query") {
    rc.queries.push_back(value);
  } else if (key == "steps") {
    rc.steps = parse_size(key, value);
  } else if (key == "lr") {
    rc.lr = parse_double(key, value);
  } else if (key == "images") {
    rc.images = parse_size(key, value);
  } else if (key == "corrupt") {
    rc.corrupt = value;
  } else if (key == "name") {
    rc.model.name = value;
  } else if (key == "num_classes") {
    rc.model.num_classes = parse_size(key, value);
  } else if (key == "in_channels") {
    rc.model.in_channels = parse_size(key, value);
  } else if (key == "mlp_ratio") {
    rc.model.mlp_ratio = parse_double(key, value);
  } else if (key == "drop_path") {
    rc.model.drop_path_max = parse_double(key, value);
  } else if (auto it = stage_keys().find(key); it != stage_keys().end()) {
    const auto vals = parse_stages(key, value);
    for (std::size_t i = 0; i < kNumStages; ++i) rc.model.stages[i].*(it->second) = vals[i];
  } else {
    throw ArgumentError("unknown config key '" + key + "'");
  }
}

using Settings = std::vector<std::pair<std::string, std::string>>;

// Flat `key = value` lines; `#` starts a comment.
inline Settings read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open config '" + path + "'");
  Settings settings;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ArgumentError(path + ":" + std::to_string(n) + ": expected 'key = value'");
    settings.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return settings;
}

// The preset (from `preset_override` if set, else from the settings) is applied first, so the
// remaining keys refine it regardless of their order.
inline void apply_settings(RunConfig& rc, const Settings& settings, const std::optional<std::string>& preset_override) {
  if (preset_override) {
    apply_setting(rc, "preset", *preset_override);
  } else {
    for (const auto& [k, v] : settings)
      if (k == "preset") apply_setting(rc, k, v);
  }
  for (const auto& [k, v] : settings)
    if (k != "preset") apply_setting(rc, k, v);
}

// The resolved configuration in config-file syntax.
inline std::string describe(const RunConfig& rc) {
  using detail::join_stages;
  std::ostringstream os;
  const ModelConfig& m = rc.model;
  os << "preset = " << rc.preset << '\n'
     << "name = " << m.name << '\n'
     << "res = " << m.resolution << '\n'
     << "num_classes = " << m.num_classes << '\n'
     << "in_channels = " << m.in_channels << '\n'
     << "mlp_ratio = " << detail::format_double(m.mlp_ratio) << '\n'
     << "drop_path = " << detail::format_double(m.drop_path_max) << '\n';
  for (const auto& [key, field] : detail::stage_keys()) os << key << " = " << join_stages(m, field) << '\n';
  os << "seed = " << rc.seed << '\n'
     << "checkpoint = " << rc.checkpoint << '\n'
     << "input = " << rc.input << '\n'
     << "out = " << rc.out << '\n';
  for (const auto& q : rc.queries) os << "query = " << q << '\n';
  os << "steps = " << rc.steps << '\n'
     << "lr = " << detail::format_double(rc.lr) << '\n'
     << "images = " << rc.images << '\n'
     << "corrupt = " << rc.corrupt << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Inputs

// Binary PPM (P6, maxval <= 255), normalized per channel as (v / 255 - 0.5) / 0.5.
inline Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArgumentError("cannot open input '" + path + "'");
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) return t;
      } else {
        t += c;
      }
    }
    return t;
  };
  if (token() != "P6") throw FormatError("'" + path + "': not a binary PPM (P6)");
  const std::size_t w = detail::parse_size("ppm width", token());
  const std::size_t h = detail::parse_size("ppm height", token());
  const std::size_t maxval = detail::parse_size("ppm maxval", token());
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw FormatError("'" + path + "': unsupported PPM header");
  std::vector<unsigned char> raw(w * h * 3);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("'" + path + "': truncated PPM pixel data");
  }
  Tensor t({1, h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i) t[i] = (raw[i] / static_cast<double>(maxval) - 0.5) / 0.5;
  return t;
}

// Tensor file with a single B x H x W x C entry named `input`, or a PPM image.
inline Tensor load_input(const std::string& path) {
  if (path.empty()) throw ArgumentError("--input is required");
  if (!std::filesystem::exists(path)) throw ArgumentError("input '" + path + "' does not exist");
  if (path.ends_with(".ppm")) return read_ppm(path);
  for (auto& [name, t] : read_tensor_file(path)) {
    if (name != "input") continue;
    if (t.rank() == 3) return std::move(t).reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
    if (t.rank() != 4) throw DataError("'" + path + "': input must be B x H x W x C, got " + shape_str(t.shape()));
    return std::move(t);
  }
  throw FormatError("'" + path + "': no tensor named 'input'");
}

inline void write_input_file(const std::string& path, const Tensor& images) {
  write_tensor_file(path, {{"input", &images}});
}

inline Model load_model(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ArgumentError("--checkpoint is required");
  if (!std::filesystem::exists(rc.checkpoint)) throw ArgumentError("checkpoint '" + rc.checkpoint + "' does not exist");
  return load_checkpoint(rc.checkpoint, rc.model);
}

// Output file stream, or `fallback` when no path is given.
class Output {
 public:
  Output(const std::string& path, std::ostream& fallback) {
    if (path.empty()) {
      os_ = &fallback;
      return;
    }
    file_.open(path, std::ios::binary | std::ios::trunc);
    if (!file_) throw ArgumentError("cannot open output '" + path + "'");
    os_ = &file_;
  }
  std::ostream& operator*() { return *os_; }

 private:
  std::ofstream file_;
  std::ostream* os_;
};

inline std::pair<std::size_t, std::size_t> parse_query(const std::string& q) {
  const auto comma = q.find(',');
  if (comma == std::string::npos) throw ArgumentError("query '" + q + "' must be row,col");
  return {detail::parse_size("query row", detail::trim(q.substr(0, comma))),
          detail::parse_size("query col", detail::trim(q.substr(comma + 1)))};
}

inline std::filesystem::path output_dir(const std::string& out, const char* fallback) {
  std::filesystem::path dir = out.empty() ? fallback : out;
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Commands

// One `index score` line per class, batch elements one after another.
inline int cmd_infer(const RunConfig& rc, std::ostream& out) {
  const Model m = load_model(rc);
  const Tensor images = load_input(rc.input);
  const Tensor logits = forward_logits(m, images);
  Output o(rc.out, out);
  const std::size_t k = logits.dim(1);
  for (std::size_t n = 0; n < logits.dim(0); ++n)
    for (std::size_t j = 0; j < k; ++j) *o << j << ' ' << detail::format_double(logits[n * k + j]) << '\n';
  return kOk;
}

inline int cmd_flops(const RunConfig& rc, std::ostream& out) {
  validate_config(rc.model);
  const Model m = build_model(rc.model, rc.seed);
  const CostReport rep = model_cost(m, rc.model.resolution);
  Output o(rc.out, out);
  rep.write(*o);
  return kOk;
}

// One line per checked block: check, block, coordinates, error, tolerance, verdict.
inline int cmd_gradcheck(const RunConfig& rc, std::ostream& out) {
  SuiteOptions opt;
  opt.seed = rc.seed;
  opt.corrupt = rc.corrupt;
  if (!rc.corrupt.empty()) {
    bool known = false;
    for (const auto& c : gradcheck_suite()) known |= c.name == rc.corrupt;
    if (!known) throw ArgumentError("--corrupt: no check named '" + rc.corrupt + "'");
  }
  Output o(rc.out, out);
  const BlockResult* worst = nullptr;
  double worst_ratio = -1.0;
  std::size_t blocks = 0, failed = 0;
  const auto results = run_gradcheck_suite(opt, {}, [&](const SuiteResult& r) {
    for (const auto& b : r.report.blocks) {
      *o << r.check << '\t' << b.name << '\t' << b.checked << '\t' << detail::format_double(b.error()) << '\t'
         << b.tolerance << '\t' << (b.passed ? "ok" : "FAIL") << '\n';
    }
    (*o).flush();
  });
  for (const auto& r : results)
    for (const auto& b : r.report.blocks) {
      ++blocks;
      failed += !b.passed;
      if (b.error() / b.tolerance > worst_ratio) {
        worst_ratio = b.error() / b.tolerance;
        worst = &b;
      }
    }
  out << "# " << blocks << " blocks, " << failed << " failed";
  if (worst) out << "; worst " << worst->name << " error " << detail::format_double(worst->error()) << " tolerance " << worst->tolerance;
  out << '\n';
  return failed ? kCheckFailed : kOk;
}

// Writes layer<i>.txt (`x y score` per deformed key) for every DMHA layer of the first image,
// and for each query query_<row>_<col>_layer<i>.txt with one line of N_s weights per head.
// Queries are input-pixel positions mapped onto each layer's map.
inline int cmd_dump_attn(const RunConfig& rc, std::ostream& out) {
  const Model m = load_model(rc);
  const Tensor images = load_input(rc.input);
  std::vector<std::pair<std::size_t, std::size_t>> queries;
  for (const auto& q : rc.queries) {
    queries.push_back(parse_query(q));
    if (queries.back().first >= images.dim(1) || queries.back().second >= images.dim(2)) {
      throw ArgumentError("query (" + q + ") outside the " + std::to_string(images.dim(1)) + "x" +
                          std::to_string(images.dim(2)) + " input");
    }
  }
  ModelCache cache;
  forward_features(m, images, &cache);
  const auto traces = collect_traces(m, cache);
  const ImportanceMap map = importance_map(traces);
  const auto dir = output_dir(rc.out, "attention");
  for (std::size_t l = 0; l < map.layers.size(); ++l) {
    const auto& li = map.layers[l];
    std::ofstream f(dir / ("layer" + std::to_string(l) + ".txt"));
    write_importance(li, f);
    out << "# layer " << l << ": map " << li.height << "x" << li.width << ", " << li.groups << " groups of "
        << li.grid_h << "x" << li.grid_w << " points\n";
    for (const auto& [row, col] : queries) {
      const std::size_t r = row * li.height / images.dim(1), c = col * li.width / images.dim(2);
      const Tensor rows = query_attention(*traces[l], r, c);
      std::ofstream q(dir / ("query_" + std::to_string(row) + "_" + std::to_string(col) + "_layer" + std::to_string(l) +
                             ".txt"));
      for (std::size_t h = 0; h < rows.dim(0); ++h) {
        for (std::size_t j = 0; j < rows.dim(1); ++j) q << (j ? " " : "") << detail::format_double(rows[h * rows.dim(1) + j]);
        q << '\n';
      }
    }
  }
  return kOk;
}

// Trains on the two-class texture set with a zeroed classifier head; writes trajectory.txt
// (`step loss accuracy`) and model.datw.
inline int cmd_train_toy(const RunConfig& rc, std::ostream& out) {
  validate_config(rc.model);
  Model m = build_model(rc.model, rc.seed);
  m.head_w.fill(0.0);
  m.head_b.fill(0.0);
  const Batch data = make_texture_dataset(rc.images, rc.model.resolution, rc.seed);
  for (auto l : data.labels)
    if (l >= rc.model.num_classes) throw DataError("toy data has 2 classes; model has " + std::to_string(rc.model.num_classes));
  TrainOptions opt;
  opt.steps = rc.steps;
  opt.lr = rc.lr;
  opt.seed = rc.seed;
  const auto history = train_steps(m, [&](std::size_t) -> const Batch& { return data; }, opt);
  const auto dir = output_dir(rc.out, "toy-run");
  std::ofstream traj(dir / "trajectory.txt");
  for (std::size_t s = 0; s < history.size(); ++s)
    traj << s << ' ' << detail::format_double(history[s].loss) << ' ' << detail::format_double(history[s].accuracy) << '\n';
  save_checkpoint(m, (dir / "model.datw").string());
  if (!history.empty()) {
    out << "# step 0 loss " << detail::format_double(history.front().loss) << "; step " << history.size() - 1
        << " loss " << detail::format_double(history.back().loss) << " accuracy "
        << detail::format_double(history.back().accuracy) << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deformable attention backbone tools"};
  app.require_subcommand(1);
  struct Flags {
    std::optional<std::string> preset, config, checkpoint, input, out, corrupt;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> res, steps, images;
    std::optional<double> lr;
    std::vector<std::string> queries;
  } f;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"infer", "Classify an input tensor or PPM with a checkpoint"},
      {"flops", "Per-module FLOPs and parameter counts"},
      {"gradcheck", "Check every analytic backward against finite differences"},
      {"dump-attn", "Write deformed key importance and per-query attention"},
      {"train-toy", "Train on synthetic two-class textures"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--preset", f.preset, "Model preset");
    sub->add_option("--config", f.config, "key = value config file");
    sub->add_option("--seed", f.seed, "Random seed");
    sub->add_option("--res", f.res, "Input resolution");
    sub->add_option("--checkpoint", f.checkpoint, "Checkpoint path");
    sub->add_option("--input", f.input, "Input tensor file or .ppm");
    sub->add_option("--out", f.out, "Output file or directory");
    sub->add_option("--query", f.queries, "Query position row,col in input pixels (repeatable)");
    sub->add_option("--steps", f.steps, "Optimizer steps");
    sub->add_option("--lr", f.lr, "Learning rate");
    sub->add_option("--images", f.images, "Synthetic training images");
    sub->add_option("--corrupt", f.corrupt, "Sign-flip the analytic gradient of one check");
  }

  std::vector<std::string> storage{"dat"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  RunConfig rc;
  rc.command = app.get_subcommands().front()->get_name();
  try {
    apply_settings(rc, f.config ? read_config_file(*f.config) : Settings{}, f.preset);
    if (f.seed) rc.seed = *f.seed;
    if (f.res) rc.model.resolution = *f.res;
    if (f.checkpoint) rc.checkpoint = *f.checkpoint;
    if (f.input) rc.input = *f.input;
    if (f.out) rc.out = *f.out;
    if (!f.queries.empty()) rc.queries = f.queries;
    if (f.steps) rc.steps = *f.steps;
    if (f.lr) rc.lr = *f.lr;
    if (f.images) rc.images = *f.images;
    if (f.corrupt) rc.corrupt = *f.corrupt;

    out << "# dat " << rc.command << '\n';
    std::istringstream echo(describe(rc));
    for (std::string line; std::getline(echo, line);) out << "# " << line << '\n';

    if (rc.command == "infer") return cmd_infer(rc, out);
    if (rc.command == "flops") return cmd_flops(rc, out);
    if (rc.command == "gradcheck") return cmd_gradcheck(rc, out);
    if (rc.command == "dump-attn") return cmd_dump_attn(rc, out);
    return cmd_train_toy(rc, out);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kCheckFailed;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace dat::cli
