#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "kmat/datagen.hpp"
#include "kmat/errors.hpp"
#include "kmat/evalkit.hpp"
#include "kmat/objectives.hpp"
#include "kmat/prompt_space.hpp"
#include "kmat/trainer.hpp"

// Library layer behind the command-line tool. Everything here is callable
// from tests; the binary only parses flags and maps exceptions to exit codes.
namespace kmat::cli {

using nlohmann::json;

// ---- config plumbing ------------------------------------------------------

// Every tunable with its default. User config files may override any subset;
// unknown keys are rejected so typos cannot silently fall back to defaults.
inline json default_config() {
  const TrainConfig d{};
  return {
      {"train",
       {{"epochs", d.epochs},
        {"batch_size", d.batch_size},
        {"base_lr", d.base_lr},
        {"warmup_epochs", d.warmup_epochs},
        {"shots_per_class", d.shots_per_class},
        {"seeds", d.seeds}}},
      {"prompt",
       {{"context_len", d.prompt.context_len},
        {"token_dim", d.prompt.token_dim},
        {"class_specific", d.prompt.class_specific},
        {"modality_specific", d.prompt.modality_specific}}},
      {"encoder", {{"embed_dim", d.embed_dim}, {"seed", d.encoder_seed}}},
      {"loss",
       {{"temperature", d.weights.temperature},
        {"anchor_weight", d.weights.anchor_weight},
        {"transport_weight", d.weights.transport_weight},
        {"structure_weight", d.weights.structure_weight}}},
      {"solver",
       {{"epsilon", d.solver.epsilon},
        {"max_inner", d.solver.max_inner},
        {"max_outer", d.solver.max_outer},
        {"tol", d.solver.tol}}},
      {"data", {{"embeddings", ""}, {"descriptions", ""}}},
  };
}

namespace detail {

inline void merge_config(json& dst, const json& src, const std::string& prefix) {
  if (!src.is_object()) {
    throw ConfigError(prefix.empty() ? "config root must be a JSON object"
                                     : "config key '" + prefix + "' must be an object");
  }
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    json& slot = dst[it.key()];
    if (slot.is_object()) {
      merge_config(slot, it.value(), path);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace detail

// Defaults with the user's overrides merged in; the result is fully explicit
// and is what gets serialized into manifests and parameter dumps.
inline json resolve_config(const json& user) {
  json cfg = default_config();
  detail::merge_config(cfg, user, "");
  return cfg;
}

// Dotted-path lookup with errors that name the key.
template <typename T>
T get_key(const json& cfg, const std::string& dotted) {
  const json* cur = &cfg;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cur->is_object() || !cur->contains(part)) {
      throw ConfigError("missing config key '" + dotted + "'");
    }
    cur = &(*cur)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return cur->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + dotted + "' has the wrong type");
  }
}

inline TrainConfig config_from_json(const json& cfg) {
  TrainConfig out;
  out.epochs = get_key<int>(cfg, "train.epochs");
  out.batch_size = get_key<int>(cfg, "train.batch_size");
  out.base_lr = get_key<double>(cfg, "train.base_lr");
  out.warmup_epochs = get_key<int>(cfg, "train.warmup_epochs");
  out.shots_per_class = get_key<int>(cfg, "train.shots_per_class");
  out.seeds = get_key<std::vector<std::uint64_t>>(cfg, "train.seeds");
  out.encoder_seed = get_key<std::uint64_t>(cfg, "encoder.seed");
  out.embed_dim = get_key<int>(cfg, "encoder.embed_dim");
  out.prompt.context_len = get_key<int>(cfg, "prompt.context_len");
  out.prompt.token_dim = get_key<int>(cfg, "prompt.token_dim");
  out.prompt.class_specific = get_key<bool>(cfg, "prompt.class_specific");
  out.prompt.modality_specific = get_key<bool>(cfg, "prompt.modality_specific");
  out.weights.temperature = get_key<double>(cfg, "loss.temperature");
  out.weights.anchor_weight = get_key<double>(cfg, "loss.anchor_weight");
  out.weights.transport_weight = get_key<double>(cfg, "loss.transport_weight");
  out.weights.structure_weight = get_key<double>(cfg, "loss.structure_weight");
  out.solver.epsilon = get_key<double>(cfg, "solver.epsilon");
  out.solver.max_inner = get_key<int>(cfg, "solver.max_inner");
  out.solver.max_outer = get_key<int>(cfg, "solver.max_outer");
  out.solver.tol = get_key<double>(cfg, "solver.tol");
  out.validate();
  return out;
}

// ---- small file helpers ----------------------------------------------------

inline json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + std::string(e.what()));
  }
}

inline json load_params_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open parameter dump '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("parameter dump '" + path + "' is not valid JSON: " + std::string(e.what()));
  }
}

// nlohmann::json keeps keys sorted and prints doubles shortest-round-trip, so
// identical values serialize to identical bytes. Determinism of the summary
// file depends on this.
inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed while writing '" + path + "'");
}

inline std::string fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing artifact '" + path + "'");
  std::uint64_t h = 14695981039346656037ULL;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void ensure_out_dir(const std::string& out_dir) {
  if (out_dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output directory '" + out_dir + "': " + ec.message());
}

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty()) {
    throw DataError(what + " must be a non-empty 2-D array");
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw DataError(what + " has ragged rows");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw DataError(what + " contains a non-numeric entry");
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

// Manifest written last so it can carry content hashes of every artifact.
inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const std::string& config_path, const json& resolved,
                           const std::vector<std::uint64_t>& seeds,
                           const std::vector<std::string>& artifact_names) {
  json artifacts = json::object();
  for (const auto& name : artifact_names) {
    artifacts[name] = fnv1a64_file(out_dir + "/" + name);
  }
  const json manifest = {{"command", command},    {"config_path", config_path},
                         {"config", resolved},    {"seeds", seeds},
                         {"output_dir", out_dir}, {"artifacts", artifacts}};
  write_json_file(out_dir + "/manifest.json", manifest);
}

inline std::string fmt_pct(double fraction, int decimals = 1) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, 100.0 * fraction);
  return buf;
}

inline Modality parse_modality(const std::string& s) {
  if (s == "high") return Modality::kHigh;
  if (s == "low") return Modality::kLow;
  throw ConfigError("--modality must be 'high', 'low', or 'both'");
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("--split must be 'train', 'val', or 'test'");
}

// ---- gen -------------------------------------------------------------------

struct GenOptions {
  SyntheticSpec spec;
  int descriptions_per_class = 50;
  double description_noise = 0.1;
  std::string out_dir;
};

// Writes embeddings.txt (classification fixtures), descriptions.txt
// (prototype material in the same format), and a manifest. Byte-identical
// on re-run with the same options.
inline void run_gen(const GenOptions& opt, std::ostream& os) {
  ensure_out_dir(opt.out_dir);
  const SyntheticData data = generate(opt.spec);
  const DescriptionSet descriptions = synthesize_descriptions(
      data.truth, opt.descriptions_per_class, opt.description_noise, mix_seed(opt.spec.seed, 9000));

  save_embeddings(data.set, opt.out_dir + "/embeddings.txt");
  save_embeddings(to_embedding_set(descriptions), opt.out_dir + "/descriptions.txt");

  os << "wrote " << opt.out_dir << "/embeddings.txt and descriptions.txt\n";
  for (int c = 0; c < opt.spec.n_classes; ++c) {
    os << "class " << c;
    for (Modality m : {Modality::kHigh, Modality::kLow}) {
      os << "  " << modality_name(m) << " train/val/test = "
         << data.set.count(c, m, Split::kTrain) << "/" << data.set.count(c, m, Split::kVal)
         << "/" << data.set.count(c, m, Split::kTest);
    }
    os << "\n";
  }

  const json resolved = {{"gen",
                          {{"classes", opt.spec.n_classes},
                           {"dim", opt.spec.embed_dim},
                           {"train_per_class", opt.spec.train_per_class},
                           {"val_per_class", opt.spec.val_per_class},
                           {"test_per_class", opt.spec.test_per_class},
                           {"center_spread", opt.spec.center_spread},
                           {"noise", opt.spec.noise},
                           {"cross_modal_rotation", opt.spec.cross_modal_rotation},
                           {"shortcut_offset", opt.spec.shortcut_offset},
                           {"seed", opt.spec.seed},
                           {"descriptions_per_class", opt.descriptions_per_class},
                           {"description_noise", opt.description_noise}}}};
  write_manifest(opt.out_dir, "gen", "", resolved, {opt.spec.seed},
                 {"embeddings.txt", "descriptions.txt"});
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  std::string config_path;        // empty: all defaults
  std::string data_path;          // overrides data.embeddings
  std::string descriptions_path;  // overrides data.descriptions
  std::string out_dir;
  std::vector<std::uint64_t> seeds;  // empty: keep config seeds
};

struct TrainRunOutput {
  json resolved_config;
  json summary;
  std::vector<RunReport> reports;
};

namespace detail {

// Resolves the config file plus flag overrides shared by train and ablate.
inline json resolve_run_config(const std::string& config_path, const std::string& data_path,
                               const std::string& descriptions_path,
                               const std::vector<std::uint64_t>& seeds) {
  const json user = config_path.empty() ? json::object() : load_config_json(config_path);
  json resolved = resolve_config(user);
  if (!data_path.empty()) resolved["data"]["embeddings"] = data_path;
  if (!descriptions_path.empty()) resolved["data"]["descriptions"] = descriptions_path;
  if (!seeds.empty()) resolved["train"]["seeds"] = seeds;
  return resolved;
}

inline LabeledEmbeddingSet load_run_data(const json& resolved) {
  const std::string path = get_key<std::string>(resolved, "data.embeddings");
  if (path.empty()) {
    throw ConfigError("missing config key 'data.embeddings' (path to the embedding fixture)");
  }
  return load_embeddings(path);
}

inline AnchorPrototypes load_run_anchors(const json& resolved) {
  const std::string path = get_key<std::string>(resolved, "data.descriptions");
  if (path.empty()) {
    throw ConfigError(
        "missing config key 'data.descriptions' (required while loss.anchor_weight > 0)");
  }
  return build_prototypes(descriptions_from_set(load_embeddings(path)));
}

inline json per_seed_summary(const RunReport& r) {
  return {{"seed", r.seed},
          {"high_accuracy", r.metrics.high.accuracy},
          {"low_accuracy", r.metrics.low.accuracy},
          {"high_f1", r.metrics.high.macro_f1},
          {"low_f1", r.metrics.low.macro_f1},
          {"harmonic_accuracy", r.metrics.harmonic_accuracy},
          {"harmonic_f1", r.metrics.harmonic_macro_f1}};
}

inline void print_outcome(std::ostream& os, const EvalOutcome& m) {
  os << "  high  acc " << fmt_pct(m.high.accuracy) << "%  macro-F1 " << fmt_pct(m.high.macro_f1)
     << "%\n";
  os << "  low   acc " << fmt_pct(m.low.accuracy) << "%  macro-F1 " << fmt_pct(m.low.macro_f1)
     << "%\n";
  os << "  harmonic  acc " << fmt_pct(m.harmonic_accuracy) << "%  macro-F1 "
     << fmt_pct(m.harmonic_macro_f1) << "%\n";
}

}  // namespace detail

// Trains every seed on the high-end slice of the fixture, evaluates on the
// full test split, and writes per-seed reports, parameter dumps, projection
// CSVs, a seed-averaged summary, and the manifest.
inline TrainRunOutput run_train(const TrainOptions& opt, std::ostream& os) {
  const json resolved = detail::resolve_run_config(opt.config_path, opt.data_path,
                                                   opt.descriptions_path, opt.seeds);
  const TrainConfig cfg = config_from_json(resolved);
  const LabeledEmbeddingSet full = detail::load_run_data(resolved);
  const LabeledEmbeddingSet train_input = full.filter(Modality::kHigh, std::nullopt);

  std::optional<AnchorPrototypes> anchors;
  if (cfg.weights.anchor_weight > 0.0) anchors = detail::load_run_anchors(resolved);

  ensure_out_dir(opt.out_dir);
  TrainRunOutput out;
  out.resolved_config = resolved;
  std::vector<std::string> artifacts;
  json per_seed = json::array();
  double mean_high_acc = 0, mean_low_acc = 0, mean_high_f1 = 0, mean_low_f1 = 0;
  double mean_h_acc = 0, mean_h_f1 = 0;
  bool any_shortfall = false;

  for (std::uint64_t seed : cfg.seeds) {
    const TrainResult result = train(train_input, anchors ? &*anchors : nullptr, cfg, seed);
    RunReport report;
    report.seed = seed;
    report.metrics = evaluate(full, result.embeddings, cfg.weights.temperature);
    report.loss_trace = result.loss_trace;
    report.shot_shortfall = result.shot_shortfall;
    report.shortfall_classes = result.shortfall_classes;
    report.config_snapshot = resolved;

    const std::string tag = "seed" + std::to_string(seed);
    write_json_file(opt.out_dir + "/report_" + tag + ".json", report_to_json(report));
    artifacts.push_back("report_" + tag + ".json");

    json slots = json::array();
    for (const auto& slot : result.bank.contexts()) slots.push_back(matrix_to_json(slot));
    const json params = {{"seed", seed},
                         {"config", resolved},
                         {"n_classes", full.n_classes()},
                         {"context_slots", std::move(slots)},
                         {"class_tokens", matrix_to_json(result.bank.class_tokens())},
                         {"embeddings",
                          {{"high", matrix_to_json(result.embeddings.high)},
                           {"low", matrix_to_json(result.embeddings.low)}}}};
    write_json_file(opt.out_dir + "/params_" + tag + ".json", params);
    artifacts.push_back("params_" + tag + ".json");

    // 2-D projection of the test features plus the learned prompt rows.
    auto [xh, yh] = full.matrix(Modality::kHigh, Split::kTest);
    auto [xl, yl] = full.matrix(Modality::kLow, Split::kTest);
    const Eigen::Index n_rows = xh.rows() + xl.rows() + result.embeddings.high.rows() +
                                result.embeddings.low.rows();
    Eigen::MatrixXd stacked(n_rows, full.dim());
    std::vector<int> labels;
    std::vector<Modality> modalities;
    Eigen::Index at = 0;
    stacked.middleRows(at, xh.rows()) = xh;
    at += xh.rows();
    for (int y : yh) labels.push_back(y), modalities.push_back(Modality::kHigh);
    stacked.middleRows(at, xl.rows()) = xl;
    at += xl.rows();
    for (int y : yl) labels.push_back(y), modalities.push_back(Modality::kLow);
    for (Modality m : {Modality::kHigh, Modality::kLow}) {
      const Eigen::MatrixXd& rows = result.embeddings.rows(m);
      stacked.middleRows(at, rows.rows()) = rows;
      at += rows.rows();
      for (int c = 0; c < rows.rows(); ++c) labels.push_back(c), modalities.push_back(m);
    }
    const Projection proj = project_2d(stacked);
    write_projection_csv(opt.out_dir + "/projection_" + tag + ".csv", labels, modalities,
                         proj.coords);
    artifacts.push_back("projection_" + tag + ".csv");

    if (report.shot_shortfall && !any_shortfall) {
      os << "warning: some classes have fewer than " << cfg.shots_per_class
         << " high-end training records (classes:";
      for (int c : report.shortfall_classes) os << ' ' << c;
      os << "); using all available\n";
    }
    any_shortfall = any_shortfall || report.shot_shortfall;

    os << "seed " << seed << ": high acc " << fmt_pct(report.metrics.high.accuracy)
       << "%, low acc " << fmt_pct(report.metrics.low.accuracy) << "%, harmonic "
       << fmt_pct(report.metrics.harmonic_accuracy) << "%";
    if (!report.loss_trace.empty()) {
      os << ", final loss " << report.loss_trace.back().total;
    }
    os << "\n";

    const double n = static_cast<double>(cfg.seeds.size());
    mean_high_acc += report.metrics.high.accuracy / n;
    mean_low_acc += report.metrics.low.accuracy / n;
    mean_high_f1 += report.metrics.high.macro_f1 / n;
    mean_low_f1 += report.metrics.low.macro_f1 / n;
    mean_h_acc += report.metrics.harmonic_accuracy / n;
    mean_h_f1 += report.metrics.harmonic_macro_f1 / n;
    per_seed.push_back(detail::per_seed_summary(report));
    out.reports.push_back(std::move(report));
  }

  // Both aggregations of the harmonic metrics: the mean of per-seed harmonic
  // values is primary; the harmonic of the seed means is reported alongside.
  out.summary = {{"per_seed", std::move(per_seed)},
                 {"mean",
                  {{"high_accuracy", mean_high_acc},
                   {"low_accuracy", mean_low_acc},
                   {"high_f1", mean_high_f1},
                   {"low_f1", mean_low_f1},
                   {"harmonic_accuracy", mean_h_acc},
                   {"harmonic_f1", mean_h_f1},
                   {"harmonic_accuracy_of_means", harmonic_mean(mean_high_acc, mean_low_acc)},
                   {"harmonic_f1_of_means", harmonic_mean(mean_high_f1, mean_low_f1)}}},
                 {"shot_shortfall", any_shortfall}};
  write_json_file(opt.out_dir + "/summary.json", out.summary);
  artifacts.push_back("summary.json");

  os << "mean over " << cfg.seeds.size() << " seeds: high acc " << fmt_pct(mean_high_acc)
     << "%, low acc " << fmt_pct(mean_low_acc) << "%, harmonic " << fmt_pct(mean_h_acc) << "%\n";

  write_manifest(opt.out_dir, "train", opt.config_path, resolved, cfg.seeds, artifacts);
  return out;
}

// ---- ablate ----------------------------------------------------------------

struct AblateOptions {
  std::string config_path;
  std::string data_path;
  std::string descriptions_path;
  std::string out_dir;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> grid;  // cell tags like "1101"; empty: full grid
};

inline AblationCell parse_cell_tag(const std::string& tag) {
  if (tag.size() != 4 || tag.find_first_not_of("01") != std::string::npos) {
    throw ConfigError("ablation cell '" + tag +
                      "' must be four 0/1 digits (CSC, MSC, anchor, transport)");
  }
  return AblationCell{tag[0] == '1', tag[1] == '1', tag[2] == '1', tag[3] == '1'};
}

inline std::vector<AblationRow> run_ablate(const AblateOptions& opt, std::ostream& os) {
  const json resolved = detail::resolve_run_config(opt.config_path, opt.data_path,
                                                   opt.descriptions_path, opt.seeds);
  const TrainConfig cfg = config_from_json(resolved);
  const LabeledEmbeddingSet full = detail::load_run_data(resolved);

  std::vector<AblationCell> cells;
  if (opt.grid.empty()) {
    cells = full_ablation_grid();
  } else {
    for (const auto& tag : opt.grid) cells.push_back(parse_cell_tag(tag));
  }

  std::optional<AnchorPrototypes> anchors;
  const bool anchors_needed =
      cfg.weights.anchor_weight > 0.0 &&
      std::any_of(cells.begin(), cells.end(), [](const AblationCell& c) { return c.use_anchor; });
  if (anchors_needed) anchors = detail::load_run_anchors(resolved);

  ensure_out_dir(opt.out_dir);
  const std::vector<AblationRow> rows =
      run_ablation(full, anchors ? &*anchors : nullptr, cfg, cells);

  os << "CSC MSC ANC FGW |  Hi-ACC  Lo-ACC   H-ACC |   Hi-F1   Lo-F1    H-F1 |     dACC      dF1\n";
  json rows_json = json::array();
  for (const auto& row : rows) {
    char line[160];
    std::snprintf(line, sizeof line,
                  "  %c   %c   %c   %c | %7s %7s %7s | %7s %7s %7s | %+8.2f %+8.2f\n",
                  row.cell.class_specific ? '1' : '0', row.cell.modality_specific ? '1' : '0',
                  row.cell.use_anchor ? '1' : '0', row.cell.use_transport ? '1' : '0',
                  fmt_pct(row.high_accuracy).c_str(), fmt_pct(row.low_accuracy).c_str(),
                  fmt_pct(row.harmonic_accuracy).c_str(), fmt_pct(row.high_f1).c_str(),
                  fmt_pct(row.low_f1).c_str(), fmt_pct(row.harmonic_f1).c_str(),
                  row.rel_improvement_acc, row.rel_improvement_f1);
    os << line;

    json per_seed = json::array();
    for (const auto& r : row.reports) per_seed.push_back(detail::per_seed_summary(r));
    rows_json.push_back({{"cell", row.cell.tag()},
                         {"components",
                          {{"class_specific", row.cell.class_specific},
                           {"modality_specific", row.cell.modality_specific},
                           {"anchor", row.cell.use_anchor},
                           {"transport", row.cell.use_transport}}},
                         {"high_accuracy", row.high_accuracy},
                         {"low_accuracy", row.low_accuracy},
                         {"high_f1", row.high_f1},
                         {"low_f1", row.low_f1},
                         {"harmonic_accuracy", row.harmonic_accuracy},
                         {"harmonic_f1", row.harmonic_f1},
                         {"harmonic_accuracy_of_means", row.harmonic_accuracy_of_means},
                         {"harmonic_f1_of_means", row.harmonic_f1_of_means},
                         {"rel_improvement_acc", row.rel_improvement_acc},
                         {"rel_improvement_f1", row.rel_improvement_f1},
                         {"per_seed", std::move(per_seed)}});
  }
  write_json_file(opt.out_dir + "/ablation.json",
                  json{{"rows", std::move(rows_json)}, {"config", resolved}});
  write_manifest(opt.out_dir, "ablate", opt.config_path, resolved, cfg.seeds, {"ablation.json"});
  return rows;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  std::string params_path;
  std::string data_path;      // empty: use the path recorded in the dump's config
  std::string modality = "both";
  std::string split = "test";
  std::string out_dir;        // empty: print only
};

// Pure inference from a parameter dump: loads the final prompt embeddings and
// scores them against a fixture slice. Never mutates the dump. This is the
// sanctioned entry point for low-end data.
inline json run_eval(const EvalOptions& opt, std::ostream& os) {
  const json params = load_params_json(opt.params_path);
  if (!params.contains("config") || !params.contains("embeddings") ||
      !params["embeddings"].contains("high") || !params["embeddings"].contains("low")) {
    throw DataError("parameter dump '" + opt.params_path +
                    "' lacks the 'config'/'embeddings' sections");
  }
  const json& resolved = params["config"];
  ClassEmbeddings emb;
  emb.high = matrix_from_json(params["embeddings"]["high"], "embeddings.high");
  emb.low = matrix_from_json(params["embeddings"]["low"], "embeddings.low");
  if (emb.high.rows() != emb.low.rows() || emb.high.cols() != emb.low.cols()) {
    throw ShapeError("parameter dump modalities disagree on shape");
  }
  const int embed_dim = get_key<int>(resolved, "encoder.embed_dim");
  if (emb.high.cols() != embed_dim) {
    throw ShapeError("parameter dump width (" + std::to_string(emb.high.cols()) +
                     ") does not match its config embed_dim (" + std::to_string(embed_dim) + ")");
  }

  const std::string data_path =
      opt.data_path.empty() ? get_key<std::string>(resolved, "data.embeddings") : opt.data_path;
  if (data_path.empty()) throw ConfigError("--data is required (the dump records no path)");
  const LabeledEmbeddingSet data = load_embeddings(data_path);
  if (data.dim() != emb.high.cols()) {
    throw ShapeError("parameter dump dimension (" + std::to_string(emb.high.cols()) +
                     ") does not match the data dimension (" + std::to_string(data.dim()) + ")");
  }
  if (data.n_classes() != emb.high.rows()) {
    throw ShapeError("parameter dump class count (" + std::to_string(emb.high.rows()) +
                     ") does not match the data (" + std::to_string(data.n_classes()) + ")");
  }

  const double temperature = get_key<double>(resolved, "loss.temperature");
  const Split split = parse_split(opt.split);
  const std::optional<Modality> single =
      opt.modality == "both" ? std::nullopt : std::optional<Modality>(parse_modality(opt.modality));
  json result = {{"split", opt.split}, {"modality", opt.modality}};
  os << opt.split << " split:\n";
  if (!single) {
    const EvalOutcome outcome = evaluate(data, emb, temperature, split);
    detail::print_outcome(os, outcome);
    result["high"] = metrics_to_json(outcome.high);
    result["low"] = metrics_to_json(outcome.low);
    result["harmonic_accuracy"] = outcome.harmonic_accuracy;
    result["harmonic_f1"] = outcome.harmonic_macro_f1;
  } else {
    const Modality m = *single;
    const ModalityMetrics metrics = evaluate_slice(data, m, split, emb.rows(m), temperature);
    os << "  " << modality_name(m) << "  acc " << fmt_pct(metrics.accuracy) << "%  macro-F1 "
       << fmt_pct(metrics.macro_f1) << "%\n";
    result[opt.modality] = metrics_to_json(metrics);
  }

  if (!opt.out_dir.empty()) {
    ensure_out_dir(opt.out_dir);
    write_json_file(opt.out_dir + "/eval_report.json", result);
    write_manifest(opt.out_dir, "eval", opt.params_path, resolved, {}, {"eval_report.json"});
  }
  return result;
}

}  // namespace kmat::cli
