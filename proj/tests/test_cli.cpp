#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kmat/cli.hpp"
#include "kmat/errors.hpp"
#include "kmat/evalkit.hpp"
#include "kmat/trainer.hpp"

#include "oracle_helpers.hpp"

using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using nlohmann::json;
using kmat::ConfigError;
using kmat::DataError;
using kmat::ShapeError;

namespace {

bool file_exists(const std::string& path) { return std::ifstream(path).good(); }

json parse_file(const std::string& path) { return json::parse(oracle::read_file(path)); }

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

// One small synthetic corpus (embeddings + descriptions + a config file)
// shared by the train/ablate/eval cases below. Built once per process.
struct CorpusFixture {
  oracle::TempDir dir;
  std::string data_path;
  std::string descriptions_path;
  std::string config_path;
  std::string gen_output;

  CorpusFixture() {
    kmat::cli::GenOptions gen;
    gen.spec.n_classes = 3;
    gen.spec.embed_dim = 8;
    gen.spec.train_per_class = 6;
    gen.spec.val_per_class = 2;
    gen.spec.test_per_class = 4;
    gen.spec.noise = 0.1;
    gen.spec.seed = 11;
    gen.descriptions_per_class = 6;
    gen.description_noise = 0.1;
    gen.out_dir = dir.file("corpus");
    std::ostringstream os;
    kmat::cli::run_gen(gen, os);
    gen_output = os.str();
    data_path = gen.out_dir + "/embeddings.txt";
    descriptions_path = gen.out_dir + "/descriptions.txt";

    const json cfg = {{"train",
                       {{"epochs", 2},
                        {"batch_size", 4},
                        {"shots_per_class", 4},
                        {"warmup_epochs", 1},
                        {"seeds", {0, 1}}}},
                      {"prompt", {{"context_len", 2}, {"token_dim", 8}}},
                      {"encoder", {{"embed_dim", 8}}},
                      {"loss", {{"anchor_weight", 0.5}}}};
    config_path = dir.file("config.json");
    kmat::cli::write_json_file(config_path, cfg);
  }
};

const CorpusFixture& corpus() {
  static CorpusFixture fixture;
  return fixture;
}

kmat::cli::TrainOptions corpus_train_options(const std::string& out_dir) {
  const CorpusFixture& c = corpus();
  kmat::cli::TrainOptions opt;
  opt.config_path = c.config_path;
  opt.data_path = c.data_path;
  opt.descriptions_path = c.descriptions_path;
  opt.out_dir = out_dir;
  return opt;
}

// One full training run over the shared corpus, reused by several cases.
struct TrainFixture {
  std::string out_dir;
  kmat::cli::TrainRunOutput out;
  std::string stdout_text;

  TrainFixture() {
    out_dir = corpus().dir.file("train_out");
    std::ostringstream os;
    out = kmat::cli::run_train(corpus_train_options(out_dir), os);
    stdout_text = os.str();
  }
};

const TrainFixture& trained() {
  static TrainFixture fixture;
  return fixture;
}

}  // namespace

// ---- config plumbing --------------------------------------------------------

TEST_CASE("resolved config materializes every default") {
  const json cfg = kmat::cli::resolve_config(json::object());
  CHECK(cfg["train"]["epochs"] == 50);
  CHECK(cfg["train"]["batch_size"] == 4);
  CHECK(cfg["train"]["base_lr"] == 0.0025);
  CHECK(cfg["train"]["warmup_epochs"] == 1);
  CHECK(cfg["train"]["shots_per_class"] == 16);
  CHECK(cfg["train"]["seeds"] == json({0, 1, 2}));
  CHECK(cfg["prompt"]["context_len"] == 4);
  CHECK(cfg["prompt"]["token_dim"] == 64);
  CHECK(cfg["prompt"]["class_specific"] == true);
  CHECK(cfg["prompt"]["modality_specific"] == true);
  CHECK(cfg["encoder"]["embed_dim"] == 64);
  CHECK(cfg["encoder"]["seed"] == 17);
  CHECK(cfg["loss"]["temperature"] == 0.07);
  CHECK(cfg["loss"]["anchor_weight"] == 1.0);
  CHECK(cfg["loss"]["transport_weight"] == 1.0);
  CHECK(cfg["loss"]["structure_weight"] == 0.1);
  CHECK(cfg["solver"]["epsilon"] == 0.1);
  CHECK(cfg["solver"]["max_inner"] == 100);
  CHECK(cfg["solver"]["max_outer"] == 20);
  CHECK(cfg["solver"]["tol"] == 1e-7);
  CHECK(cfg["data"]["embeddings"] == "");
  CHECK(cfg["data"]["descriptions"] == "");
}

TEST_CASE("config overrides merge into defaults without disturbing siblings") {
  const json user = {{"train", {{"epochs", 3}, {"base_lr", 0.01}}},
                     {"prompt", {{"class_specific", false}}}};
  const json cfg = kmat::cli::resolve_config(user);
  CHECK(cfg["train"]["epochs"] == 3);
  CHECK(cfg["train"]["base_lr"] == 0.01);
  CHECK(cfg["train"]["batch_size"] == 4);         // untouched sibling
  CHECK(cfg["prompt"]["class_specific"] == false);
  CHECK(cfg["prompt"]["modality_specific"] == true);
  CHECK(cfg["solver"]["epsilon"] == 0.1);
}

TEST_CASE("unknown and malformed config keys are rejected by name") {
  REQUIRE_THROWS_MATCHES(kmat::cli::resolve_config(json{{"foo", json::object()}}), ConfigError,
                         MessageMatches(ContainsSubstring("unknown config key 'foo'")));
  REQUIRE_THROWS_MATCHES(kmat::cli::resolve_config(json{{"train", {{"foo", 1}}}}), ConfigError,
                         MessageMatches(ContainsSubstring("unknown config key 'train.foo'")));
  REQUIRE_THROWS_MATCHES(kmat::cli::resolve_config(json::array({1, 2})), ConfigError,
                         MessageMatches(ContainsSubstring("config root must be a JSON object")));
  REQUIRE_THROWS_MATCHES(kmat::cli::resolve_config(json{{"train", 5}}), ConfigError,
                         MessageMatches(ContainsSubstring("'train' must be an object")));
}

TEST_CASE("dotted key lookup reports missing keys and wrong types") {
  const json cfg = kmat::cli::resolve_config(json::object());
  CHECK(kmat::cli::get_key<int>(cfg, "train.epochs") == 50);
  CHECK(kmat::cli::get_key<std::string>(cfg, "data.embeddings").empty());
  CHECK(kmat::cli::get_key<std::vector<std::uint64_t>>(cfg, "train.seeds") ==
        std::vector<std::uint64_t>{0, 1, 2});
  REQUIRE_THROWS_MATCHES(kmat::cli::get_key<int>(cfg, "train.nope"), ConfigError,
                         MessageMatches(ContainsSubstring("missing config key 'train.nope'")));
  REQUIRE_THROWS_MATCHES(kmat::cli::get_key<int>(cfg, "nowhere.at.all"), ConfigError,
                         MessageMatches(ContainsSubstring("missing config key 'nowhere.at.all'")));
  REQUIRE_THROWS_MATCHES(
      kmat::cli::get_key<int>(cfg, "data.embeddings"), ConfigError,
      MessageMatches(ContainsSubstring("config key 'data.embeddings' has the wrong type")));
}

TEST_CASE("config json converts to a validated train config") {
  const json cfg = kmat::cli::resolve_config(json::object());
  const kmat::TrainConfig tc = kmat::cli::config_from_json(cfg);
  const kmat::TrainConfig defaults{};
  CHECK(tc.epochs == defaults.epochs);
  CHECK(tc.base_lr == defaults.base_lr);
  CHECK(tc.embed_dim == defaults.embed_dim);
  CHECK(tc.encoder_seed == defaults.encoder_seed);
  CHECK(tc.seeds == defaults.seeds);
  CHECK(tc.prompt.context_len == defaults.prompt.context_len);
  CHECK(tc.weights.temperature == defaults.weights.temperature);
  CHECK(tc.solver.epsilon == defaults.solver.epsilon);

  SECTION("validation failures propagate") {
    REQUIRE_THROWS_AS(
        kmat::cli::config_from_json(kmat::cli::resolve_config(json{{"train", {{"epochs", -1}}}})),
        ConfigError);
    REQUIRE_THROWS_AS(kmat::cli::config_from_json(kmat::cli::resolve_config(
                          json{{"train", {{"epochs", 2}, {"warmup_epochs", 5}}}})),
                      ConfigError);
  }
  SECTION("object stuffed into a scalar slot fails as a wrong type") {
    const json cfg2 = kmat::cli::resolve_config(json{{"train", {{"epochs", {{"x", 1}}}}}});
    REQUIRE_THROWS_MATCHES(
        kmat::cli::config_from_json(cfg2), ConfigError,
        MessageMatches(ContainsSubstring("config key 'train.epochs' has the wrong type")));
  }
}

TEST_CASE("config and parameter files load with distinct error classes") {
  const oracle::TempDir dir;
  const std::string good = dir.file("good.json");
  kmat::cli::write_json_file(good, json{{"a", 1}});
  CHECK(parse_file(good) == json{{"a", 1}});
  const std::string text = oracle::read_file(good);
  CHECK(!text.empty());
  CHECK(text.back() == '\n');

  const std::string broken = dir.file("broken.json");
  std::ofstream(broken) << "{not json";
  REQUIRE_THROWS_MATCHES(kmat::cli::load_config_json(broken), ConfigError,
                         MessageMatches(ContainsSubstring("not valid JSON")));
  REQUIRE_THROWS_MATCHES(kmat::cli::load_params_json(broken), DataError,
                         MessageMatches(ContainsSubstring("not valid JSON")));
  REQUIRE_THROWS_MATCHES(kmat::cli::load_config_json(dir.file("missing.json")), ConfigError,
                         MessageMatches(ContainsSubstring("cannot open")));
  REQUIRE_THROWS_MATCHES(kmat::cli::load_params_json(dir.file("missing.json")), DataError,
                         MessageMatches(ContainsSubstring("cannot open")));
}

// ---- small helpers -----------------------------------------------------------

TEST_CASE("file hashing matches the reference test vectors") {
  const oracle::TempDir dir;
  const auto hash_of = [&](const std::string& content) {
    const std::string path = dir.file("probe.bin");
    std::ofstream(path, std::ios::binary) << content;
    return kmat::cli::fnv1a64_file(path);
  };
  CHECK(hash_of("") == "cbf29ce484222325");
  CHECK(hash_of("a") == "af63dc4c8601ec8c");
  CHECK(hash_of("foobar") == "85944171f73967e8");
  REQUIRE_THROWS_AS(kmat::cli::fnv1a64_file(dir.file("absent.bin")), DataError);
}

TEST_CASE("percent formatting rounds at the requested precision") {
  CHECK(kmat::cli::fmt_pct(0.4413) == "44.1");
  CHECK(kmat::cli::fmt_pct(0.10096, 2) == "10.10");
  CHECK(kmat::cli::fmt_pct(1.0) == "100.0");
  CHECK(kmat::cli::fmt_pct(0.5, 0) == "50");
  CHECK(kmat::cli::fmt_pct(0.0) == "0.0");
}

TEST_CASE("modality and split names parse strictly") {
  CHECK(kmat::cli::parse_modality("high") == kmat::Modality::kHigh);
  CHECK(kmat::cli::parse_modality("low") == kmat::Modality::kLow);
  REQUIRE_THROWS_AS(kmat::cli::parse_modality("both"), ConfigError);
  REQUIRE_THROWS_AS(kmat::cli::parse_modality("High"), ConfigError);
  CHECK(kmat::cli::parse_split("train") == kmat::Split::kTrain);
  CHECK(kmat::cli::parse_split("val") == kmat::Split::kVal);
  CHECK(kmat::cli::parse_split("test") == kmat::Split::kTest);
  REQUIRE_THROWS_AS(kmat::cli::parse_split("dev"), ConfigError);
}

TEST_CASE("ablation cell tags parse to component flags") {
  const kmat::AblationCell cell = kmat::cli::parse_cell_tag("1011");
  CHECK(cell.class_specific);
  CHECK(!cell.modality_specific);
  CHECK(cell.use_anchor);
  CHECK(cell.use_transport);
  CHECK(cell.tag() == "1011");
  for (const std::string bad : {"101", "10110", "10a1", "", "2222"}) {
    REQUIRE_THROWS_MATCHES(kmat::cli::parse_cell_tag(bad), ConfigError,
                           MessageMatches(ContainsSubstring("must be four 0/1 digits")));
  }
}

TEST_CASE("matrices round-trip through json exactly") {
  Eigen::MatrixXd m(3, 2);
  m << 0.25, -1.0, 1e-17, 3.5, -0.125, 0.1 + 0.2;
  const json j = kmat::cli::matrix_to_json(m);
  const Eigen::MatrixXd back = kmat::cli::matrix_from_json(j, "probe");
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 2);
  CHECK(back == m);  // bitwise: json stores doubles shortest-round-trip

  SECTION("malformed payloads are rejected with the field name") {
    REQUIRE_THROWS_MATCHES(kmat::cli::matrix_from_json(json::array(), "probe"), DataError,
                           MessageMatches(ContainsSubstring("probe must be a non-empty 2-D array")));
    REQUIRE_THROWS_AS(kmat::cli::matrix_from_json(json(5), "probe"), DataError);
    REQUIRE_THROWS_MATCHES(
        kmat::cli::matrix_from_json(json::parse("[[1,2],[3]]"), "probe"), DataError,
        MessageMatches(ContainsSubstring("ragged")));
    REQUIRE_THROWS_MATCHES(
        kmat::cli::matrix_from_json(json::parse("[[1,\"x\"]]"), "probe"), DataError,
        MessageMatches(ContainsSubstring("non-numeric")));
  }
}

TEST_CASE("output directories are created on demand and required") {
  REQUIRE_THROWS_MATCHES(kmat::cli::ensure_out_dir(""), ConfigError,
                         MessageMatches(ContainsSubstring("--out is required")));
  const oracle::TempDir dir;
  const std::string nested = dir.file("a/b/c");
  kmat::cli::ensure_out_dir(nested);
  CHECK(std::filesystem::is_directory(nested));
  kmat::cli::ensure_out_dir(nested);  // idempotent
  CHECK(std::filesystem::is_directory(nested));
}

// ---- gen ---------------------------------------------------------------------

TEST_CASE("gen writes fixtures, prints counts, and records verified hashes") {
  const CorpusFixture& c = corpus();
  CHECK(file_exists(c.data_path));
  CHECK(file_exists(c.descriptions_path));
  CHECK_THAT(c.gen_output, ContainsSubstring("wrote"));
  CHECK_THAT(c.gen_output, ContainsSubstring("class 0  high train/val/test = 6/2/4"));
  CHECK_THAT(c.gen_output, ContainsSubstring("low train/val/test = 6/2/4"));

  // header + 3 classes x 2 modalities x (6+2+4) records
  CHECK(count_lines(oracle::read_file(c.data_path)) == 1 + 3 * 2 * 12);
  // header + 3 classes x 2 modalities x 6 descriptions
  CHECK(count_lines(oracle::read_file(c.descriptions_path)) == 1 + 3 * 2 * 6);

  const json manifest = parse_file(c.dir.path + "/corpus/manifest.json");
  CHECK(manifest["command"] == "gen");
  CHECK(manifest["seeds"] == json({11}));
  CHECK(manifest["config"]["gen"]["classes"] == 3);
  CHECK(manifest["config"]["gen"]["descriptions_per_class"] == 6);
  REQUIRE(manifest["artifacts"].size() == 2);
  for (const auto& [name, hash] : manifest["artifacts"].items()) {
    CHECK(hash.get<std::string>() ==
          kmat::cli::fnv1a64_file(c.dir.path + "/corpus/" + name));
  }
}

TEST_CASE("gen reruns with the same options are byte-identical") {
  const oracle::TempDir dir;
  kmat::cli::GenOptions gen;
  gen.spec.n_classes = 3;
  gen.spec.embed_dim = 8;
  gen.spec.train_per_class = 3;
  gen.spec.val_per_class = 1;
  gen.spec.test_per_class = 2;
  gen.spec.seed = 11;
  gen.descriptions_per_class = 2;

  std::ostringstream os1, os2;
  gen.out_dir = dir.file("one");
  kmat::cli::run_gen(gen, os1);
  gen.out_dir = dir.file("two");
  kmat::cli::run_gen(gen, os2);

  CHECK(oracle::read_file(dir.file("one/embeddings.txt")) ==
        oracle::read_file(dir.file("two/embeddings.txt")));
  CHECK(oracle::read_file(dir.file("one/descriptions.txt")) ==
        oracle::read_file(dir.file("two/descriptions.txt")));
  CHECK(parse_file(dir.file("one/manifest.json"))["artifacts"] ==
        parse_file(dir.file("two/manifest.json"))["artifacts"]);

  // A different seed must change the fixture bytes.
  gen.spec.seed = 12;
  gen.out_dir = dir.file("three");
  std::ostringstream os3;
  kmat::cli::run_gen(gen, os3);
  CHECK(oracle::read_file(dir.file("one/embeddings.txt")) !=
        oracle::read_file(dir.file("three/embeddings.txt")));
}

// ---- train -------------------------------------------------------------------

TEST_CASE("training run writes the full artifact set with verified hashes") {
  const TrainFixture& t = trained();
  const std::vector<std::string> expected = {
      "report_seed0.json",     "params_seed0.json", "projection_seed0.csv",
      "report_seed1.json",     "params_seed1.json", "projection_seed1.csv",
      "summary.json"};
  for (const auto& name : expected) {
    INFO(name);
    CHECK(file_exists(t.out_dir + "/" + name));
  }
  CHECK(file_exists(t.out_dir + "/manifest.json"));

  const json manifest = parse_file(t.out_dir + "/manifest.json");
  CHECK(manifest["command"] == "train");
  CHECK(manifest["config_path"] == corpus().config_path);
  CHECK(manifest["seeds"] == json({0, 1}));
  CHECK(manifest["output_dir"] == t.out_dir);
  REQUIRE(manifest["artifacts"].size() == expected.size());
  for (const auto& [name, hash] : manifest["artifacts"].items()) {
    CHECK(hash.get<std::string>() == kmat::cli::fnv1a64_file(t.out_dir + "/" + name));
  }
  // The resolved config recorded in the manifest carries the overrides.
  CHECK(manifest["config"]["data"]["embeddings"] == corpus().data_path);
  CHECK(manifest["config"]["train"]["epochs"] == 2);
  CHECK(manifest["config"]["loss"]["anchor_weight"] == 0.5);
}

TEST_CASE("training summary aggregates the per-seed metrics") {
  const TrainFixture& t = trained();
  const json summary = parse_file(t.out_dir + "/summary.json");
  CHECK(summary == t.out.summary);

  const json& per_seed = summary["per_seed"];
  REQUIRE(per_seed.size() == 2);
  CHECK(per_seed[0]["seed"] == 0);
  CHECK(per_seed[1]["seed"] == 1);

  REQUIRE(t.out.reports.size() == 2);
  for (int i = 0; i < 2; ++i) {
    const kmat::RunReport& r = t.out.reports[i];
    CHECK(per_seed[i]["high_accuracy"] == r.metrics.high.accuracy);
    CHECK(per_seed[i]["low_accuracy"] == r.metrics.low.accuracy);
    CHECK(per_seed[i]["high_f1"] == r.metrics.high.macro_f1);
    CHECK(per_seed[i]["low_f1"] == r.metrics.low.macro_f1);
    CHECK(per_seed[i]["harmonic_accuracy"] == r.metrics.harmonic_accuracy);
    CHECK(per_seed[i]["harmonic_f1"] == r.metrics.harmonic_macro_f1);
  }

  const auto mean_of = [&](const char* key) {
    return (per_seed[0][key].get<double>() + per_seed[1][key].get<double>()) / 2.0;
  };
  const json& mean = summary["mean"];
  CHECK(std::abs(mean["high_accuracy"].get<double>() - mean_of("high_accuracy")) < 1e-15);
  CHECK(std::abs(mean["low_accuracy"].get<double>() - mean_of("low_accuracy")) < 1e-15);
  CHECK(std::abs(mean["high_f1"].get<double>() - mean_of("high_f1")) < 1e-15);
  CHECK(std::abs(mean["harmonic_accuracy"].get<double>() - mean_of("harmonic_accuracy")) < 1e-15);
  CHECK(mean["harmonic_accuracy_of_means"].get<double>() ==
        kmat::harmonic_mean(mean["high_accuracy"].get<double>(),
                            mean["low_accuracy"].get<double>()));
  CHECK(mean["harmonic_f1_of_means"].get<double>() ==
        kmat::harmonic_mean(mean["high_f1"].get<double>(), mean["low_f1"].get<double>()));
  CHECK(summary["shot_shortfall"] == false);

  CHECK_THAT(t.stdout_text, ContainsSubstring("seed 0:"));
  CHECK_THAT(t.stdout_text, ContainsSubstring("seed 1:"));
  CHECK_THAT(t.stdout_text, ContainsSubstring("mean over 2 seeds:"));
  CHECK_THAT(t.stdout_text, ContainsSubstring("final loss"));
  CHECK_THAT(t.stdout_text, !ContainsSubstring("warning:"));
}

TEST_CASE("training artifacts carry the frozen class count and loss trace") {
  const TrainFixture& t = trained();
  const json params = parse_file(t.out_dir + "/params_seed0.json");
  CHECK(params["seed"] == 0);
  CHECK(params["n_classes"] == 3);
  // CSC x MSC prompt bank: 3 classes x 2 modalities = 6 context slots.
  CHECK(params["context_slots"].size() == 6);
  CHECK(params["context_slots"][0].size() == 2);     // context_len rows
  CHECK(params["context_slots"][0][0].size() == 8);  // token_dim columns
  CHECK(params["class_tokens"].size() == 3);
  CHECK(params["embeddings"]["high"].size() == 3);
  CHECK(params["embeddings"]["high"][0].size() == 8);
  CHECK(params["embeddings"]["low"].size() == 3);

  const json report = parse_file(t.out_dir + "/report_seed0.json");
  CHECK(report["seed"] == 0);
  REQUIRE(report["loss_trace"].size() == 2);  // one entry per epoch
  for (const auto& entry : report["loss_trace"]) {
    CHECK(entry.contains("total"));
    CHECK(entry.contains("ce"));
    CHECK(entry.contains("anchor"));
    CHECK(entry.contains("transport"));
  }
  CHECK(report["shot_shortfall"] == false);

  // Projection: header + (12 high + 12 low test rows) + (3 + 3 prompt rows).
  const std::string csv = oracle::read_file(t.out_dir + "/projection_seed0.csv");
  CHECK(count_lines(csv) == 1 + 24 + 6);
  CHECK(csv.rfind("label,modality,x,y\n", 0) == 0);
}

TEST_CASE("training reruns are byte-identical") {
  const TrainFixture& t = trained();
  const std::string rerun_dir = corpus().dir.file("train_rerun");
  std::ostringstream os;
  kmat::cli::run_train(corpus_train_options(rerun_dir), os);
  for (const std::string name :
       {"summary.json", "report_seed0.json", "params_seed0.json", "projection_seed0.csv",
        "report_seed1.json", "params_seed1.json"}) {
    INFO(name);
    CHECK(oracle::read_file(t.out_dir + "/" + name) == oracle::read_file(rerun_dir + "/" + name));
  }
  CHECK(os.str() == t.stdout_text);
}

TEST_CASE("seed flags override the configured seed list") {
  kmat::cli::TrainOptions opt = corpus_train_options(corpus().dir.file("train_seed5"));
  opt.seeds = {5};
  std::ostringstream os;
  const kmat::cli::TrainRunOutput out = kmat::cli::run_train(opt, os);
  CHECK(out.resolved_config["train"]["seeds"] == json({5}));
  REQUIRE(out.summary["per_seed"].size() == 1);
  CHECK(out.summary["per_seed"][0]["seed"] == 5);
  CHECK(out.reports.size() == 1);
  CHECK_THAT(os.str(), ContainsSubstring("seed 5:"));
  CHECK_THAT(os.str(), ContainsSubstring("mean over 1 seeds:"));
}

TEST_CASE("train rejects missing fixtures with config errors") {
  SECTION("no embedding path configured") {
    kmat::cli::TrainOptions opt;
    opt.out_dir = corpus().dir.file("never_written");
    REQUIRE_THROWS_MATCHES(
        kmat::cli::run_train(opt, std::cout), ConfigError,
        MessageMatches(ContainsSubstring("missing config key 'data.embeddings'")));
  }
  SECTION("anchored loss demands a description path") {
    kmat::cli::TrainOptions opt = corpus_train_options(corpus().dir.file("never_written"));
    opt.descriptions_path = "";  // config.json sets anchor_weight 0.5 but no path
    REQUIRE_THROWS_MATCHES(
        kmat::cli::run_train(opt, std::cout), ConfigError,
        MessageMatches(ContainsSubstring("data.descriptions")));
  }
  SECTION("unanchored training needs no descriptions") {
    const CorpusFixture& c = corpus();
    const json cfg = {{"train",
                       {{"epochs", 1}, {"batch_size", 4}, {"shots_per_class", 4}, {"seeds", {0}}}},
                      {"prompt", {{"context_len", 2}, {"token_dim", 8}}},
                      {"encoder", {{"embed_dim", 8}}},
                      {"loss", {{"anchor_weight", 0.0}}}};
    const std::string cfg_path = c.dir.file("config_unanchored.json");
    kmat::cli::write_json_file(cfg_path, cfg);
    kmat::cli::TrainOptions opt;
    opt.config_path = cfg_path;
    opt.data_path = c.data_path;
    opt.out_dir = c.dir.file("train_unanchored");
    std::ostringstream os;
    const kmat::cli::TrainRunOutput out = kmat::cli::run_train(opt, os);
    CHECK(out.reports.size() == 1);
  }
}

TEST_CASE("train warns once when classes fall short of the requested shots") {
  const CorpusFixture& c = corpus();
  const json cfg = {{"train",
                     {{"epochs", 1}, {"batch_size", 4}, {"shots_per_class", 10}, {"seeds", {0}}}},
                    {"prompt", {{"context_len", 2}, {"token_dim", 8}}},
                    {"encoder", {{"embed_dim", 8}}},
                    {"loss", {{"anchor_weight", 0.0}}}};
  const std::string cfg_path = c.dir.file("config_shortfall.json");
  kmat::cli::write_json_file(cfg_path, cfg);
  kmat::cli::TrainOptions opt;
  opt.config_path = cfg_path;
  opt.data_path = c.data_path;
  opt.out_dir = c.dir.file("train_shortfall");
  std::ostringstream os;
  const kmat::cli::TrainRunOutput out = kmat::cli::run_train(opt, os);
  CHECK_THAT(os.str(), ContainsSubstring("warning: some classes have fewer than 10"));
  CHECK(out.summary["shot_shortfall"] == true);
  CHECK(out.reports[0].shortfall_classes == std::vector<int>{0, 1, 2});
}

// ---- eval --------------------------------------------------------------------

TEST_CASE("eval reproduces the metrics recorded at train time") {
  const TrainFixture& t = trained();
  kmat::cli::EvalOptions opt;
  opt.params_path = t.out_dir + "/params_seed0.json";
  // No --data flag: the dump's recorded fixture path is used.
  std::ostringstream os;
  const json result = kmat::cli::run_eval(opt, os);

  const kmat::RunReport& r = t.out.reports[0];
  CHECK(result["split"] == "test");
  CHECK(result["modality"] == "both");
  CHECK(result["high"]["accuracy"].get<double>() == r.metrics.high.accuracy);
  CHECK(result["high"]["macro_f1"].get<double>() == r.metrics.high.macro_f1);
  CHECK(result["low"]["accuracy"].get<double>() == r.metrics.low.accuracy);
  CHECK(result["low"]["macro_f1"].get<double>() == r.metrics.low.macro_f1);
  CHECK(result["harmonic_accuracy"].get<double>() == r.metrics.harmonic_accuracy);
  CHECK(result["harmonic_f1"].get<double>() == r.metrics.harmonic_macro_f1);
  CHECK_THAT(os.str(), ContainsSubstring("test split:"));
  CHECK_THAT(os.str(), ContainsSubstring("harmonic"));
}

TEST_CASE("eval slices a single modality or another split on request") {
  const TrainFixture& t = trained();
  kmat::cli::EvalOptions opt;
  opt.params_path = t.out_dir + "/params_seed0.json";

  SECTION("low-end only") {
    opt.modality = "low";
    std::ostringstream os;
    const json result = kmat::cli::run_eval(opt, os);
    CHECK(result.contains("low"));
    CHECK(!result.contains("high"));
    CHECK(!result.contains("harmonic_accuracy"));
    CHECK(result["low"]["accuracy"].get<double>() == t.out.reports[0].metrics.low.accuracy);
    CHECK_THAT(os.str(), ContainsSubstring("low"));
  }
  SECTION("validation split") {
    opt.split = "val";
    std::ostringstream os;
    const json result = kmat::cli::run_eval(opt, os);
    CHECK(result["split"] == "val");
    const double acc = result["high"]["accuracy"].get<double>();
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    // 3 classes x 2 val records: the confusion matrix must count all of them.
    int total = 0;
    for (const auto& row : result["high"]["confusion"]) {
      for (const auto& v : row) total += v.get<int>();
    }
    CHECK(total == 6);
  }
  SECTION("bad modality flag") {
    opt.modality = "sideways";
    REQUIRE_THROWS_AS(kmat::cli::run_eval(opt, std::cout), ConfigError);
  }
}

TEST_CASE("eval writes a report and manifest when given an output directory") {
  const TrainFixture& t = trained();
  kmat::cli::EvalOptions opt;
  opt.params_path = t.out_dir + "/params_seed1.json";
  opt.out_dir = corpus().dir.file("eval_out");
  std::ostringstream os;
  const json result = kmat::cli::run_eval(opt, os);
  CHECK(parse_file(opt.out_dir + "/eval_report.json") == result);
  const json manifest = parse_file(opt.out_dir + "/manifest.json");
  CHECK(manifest["command"] == "eval");
  CHECK(manifest["config_path"] == opt.params_path);
  CHECK(manifest["seeds"].empty());
  CHECK(manifest["artifacts"]["eval_report.json"].get<std::string>() ==
        kmat::cli::fnv1a64_file(opt.out_dir + "/eval_report.json"));
}

TEST_CASE("eval validates the dump against the fixture") {
  const TrainFixture& t = trained();
  const CorpusFixture& c = corpus();
  const std::string params_path = t.out_dir + "/params_seed0.json";
  const json params = kmat::cli::load_params_json(params_path);

  const auto write_dump = [&](const json& j, const std::string& name) {
    const std::string path = c.dir.file(name);
    kmat::cli::write_json_file(path, j);
    return path;
  };

  SECTION("dump without embeddings") {
    kmat::cli::EvalOptions opt;
    opt.params_path = write_dump(json{{"config", params["config"]}}, "dump_no_emb.json");
    REQUIRE_THROWS_MATCHES(kmat::cli::run_eval(opt, std::cout), DataError,
                           MessageMatches(ContainsSubstring("lacks")));
  }
  SECTION("modalities disagreeing on shape") {
    json bad = params;
    bad["embeddings"]["low"] = json::array({params["embeddings"]["high"][0]});
    kmat::cli::EvalOptions opt;
    opt.params_path = write_dump(bad, "dump_shape.json");
    REQUIRE_THROWS_MATCHES(kmat::cli::run_eval(opt, std::cout), ShapeError,
                           MessageMatches(ContainsSubstring("disagree on shape")));
  }
  SECTION("width contradicting the recorded config") {
    json bad = params;
    bad["config"]["encoder"]["embed_dim"] = 16;
    kmat::cli::EvalOptions opt;
    opt.params_path = write_dump(bad, "dump_width.json");
    REQUIRE_THROWS_MATCHES(kmat::cli::run_eval(opt, std::cout), ShapeError,
                           MessageMatches(ContainsSubstring("embed_dim")));
  }
  SECTION("no data path on record and none given") {
    json bad = params;
    bad["config"]["data"]["embeddings"] = "";
    kmat::cli::EvalOptions opt;
    opt.params_path = write_dump(bad, "dump_no_data.json");
    REQUIRE_THROWS_MATCHES(kmat::cli::run_eval(opt, std::cout), ConfigError,
                           MessageMatches(ContainsSubstring("--data is required")));
  }
  SECTION("fixture with a different dimension") {
    kmat::cli::GenOptions gen;
    gen.spec.n_classes = 3;
    gen.spec.embed_dim = 16;
    gen.spec.train_per_class = 1;
    gen.spec.val_per_class = 1;
    gen.spec.test_per_class = 1;
    gen.spec.seed = 2;
    gen.descriptions_per_class = 1;
    gen.out_dir = c.dir.file("dim16");
    std::ostringstream os;
    kmat::cli::run_gen(gen, os);
    kmat::cli::EvalOptions opt;
    opt.params_path = params_path;
    opt.data_path = gen.out_dir + "/embeddings.txt";
    REQUIRE_THROWS_MATCHES(kmat::cli::run_eval(opt, std::cout), ShapeError,
                           MessageMatches(ContainsSubstring("data dimension")));
  }
  SECTION("fixture with a different class count") {
    kmat::cli::GenOptions gen;
    gen.spec.n_classes = 4;
    gen.spec.embed_dim = 8;
    gen.spec.train_per_class = 1;
    gen.spec.val_per_class = 1;
    gen.spec.test_per_class = 1;
    gen.spec.seed = 3;
    gen.descriptions_per_class = 1;
    gen.out_dir = c.dir.file("classes4");
    std::ostringstream os;
    kmat::cli::run_gen(gen, os);
    kmat::cli::EvalOptions opt;
    opt.params_path = params_path;
    opt.data_path = gen.out_dir + "/embeddings.txt";
    REQUIRE_THROWS_MATCHES(kmat::cli::run_eval(opt, std::cout), ShapeError,
                           MessageMatches(ContainsSubstring("class count")));
  }
  SECTION("missing dump file") {
    kmat::cli::EvalOptions opt;
    opt.params_path = c.dir.file("absent_params.json");
    REQUIRE_THROWS_AS(kmat::cli::run_eval(opt, std::cout), DataError);
  }
}

TEST_CASE("an overfit run scores at least as well on its training split") {
  // Few training records per class and noticeable noise: the prompts are fit
  // on exactly the training points, so the training split cannot score below
  // the held-out test split. Frozen deterministic scenario.
  const oracle::TempDir dir;
  kmat::cli::GenOptions gen;
  gen.spec.n_classes = 3;
  gen.spec.embed_dim = 8;
  gen.spec.train_per_class = 4;
  gen.spec.val_per_class = 1;
  gen.spec.test_per_class = 10;
  gen.spec.noise = 0.4;
  gen.spec.seed = 21;
  gen.descriptions_per_class = 1;
  gen.out_dir = dir.file("corpus");
  std::ostringstream sink;
  kmat::cli::run_gen(gen, sink);

  const json cfg = {{"train",
                     {{"epochs", 15},
                      {"batch_size", 4},
                      {"base_lr", 0.01},
                      {"shots_per_class", 4},
                      {"seeds", {0}}}},
                    {"prompt", {{"context_len", 2}, {"token_dim", 8}}},
                    {"encoder", {{"embed_dim", 8}}},
                    {"loss", {{"anchor_weight", 0.0}, {"transport_weight", 0.0}}}};
  kmat::cli::write_json_file(dir.file("config.json"), cfg);

  kmat::cli::TrainOptions topt;
  topt.config_path = dir.file("config.json");
  topt.data_path = dir.file("corpus/embeddings.txt");
  topt.out_dir = dir.file("out");
  kmat::cli::run_train(topt, sink);

  kmat::cli::EvalOptions eopt;
  eopt.params_path = dir.file("out/params_seed0.json");
  eopt.split = "train";
  const double train_acc =
      kmat::cli::run_eval(eopt, sink)["high"]["accuracy"].get<double>();
  eopt.split = "test";
  const double test_acc = kmat::cli::run_eval(eopt, sink)["high"]["accuracy"].get<double>();
  CHECK(train_acc >= test_acc);
}

// ---- ablate ------------------------------------------------------------------

TEST_CASE("ablation runs a requested grid and reports relative deltas") {
  const CorpusFixture& c = corpus();
  kmat::cli::AblateOptions opt;
  opt.config_path = c.config_path;
  opt.data_path = c.data_path;
  opt.descriptions_path = c.descriptions_path;
  opt.out_dir = c.dir.file("ablate_out");
  opt.seeds = {0};
  opt.grid = {"0000", "1111"};
  std::ostringstream os;
  const std::vector<kmat::AblationRow> rows = kmat::cli::run_ablate(opt, os);

  REQUIRE(rows.size() == 2);
  CHECK(rows[0].cell.tag() == "0000");
  CHECK(rows[1].cell.tag() == "1111");
  CHECK(rows[0].rel_improvement_acc == 0.0);
  CHECK(rows[0].rel_improvement_f1 == 0.0);
  CHECK(rows[1].rel_improvement_acc ==
        kmat::relative_improvement(rows[1].harmonic_accuracy, rows[0].harmonic_accuracy));

  CHECK_THAT(os.str(), ContainsSubstring("CSC MSC ANC FGW |"));
  CHECK_THAT(os.str(), ContainsSubstring("  0   0   0   0 |"));
  CHECK_THAT(os.str(), ContainsSubstring("  1   1   1   1 |"));

  const json dump = parse_file(opt.out_dir + "/ablation.json");
  REQUIRE(dump["rows"].size() == 2);
  CHECK(dump["rows"][0]["cell"] == "0000");
  CHECK(dump["rows"][0]["components"]["class_specific"] == false);
  CHECK(dump["rows"][1]["components"]["transport"] == true);
  CHECK(dump["rows"][0]["rel_improvement_acc"] == 0.0);
  CHECK(dump["rows"][1]["harmonic_accuracy"].get<double>() == rows[1].harmonic_accuracy);
  REQUIRE(dump["rows"][0]["per_seed"].size() == 1);
  CHECK(dump["rows"][0]["per_seed"][0]["seed"] == 0);
  CHECK(dump["config"]["train"]["seeds"] == json({0}));

  const json manifest = parse_file(opt.out_dir + "/manifest.json");
  CHECK(manifest["command"] == "ablate");
  CHECK(manifest["artifacts"]["ablation.json"].get<std::string>() ==
        kmat::cli::fnv1a64_file(opt.out_dir + "/ablation.json"));
}

TEST_CASE("ablation defaults to the full component grid") {
  const CorpusFixture& c = corpus();
  const json cfg = {{"train",
                     {{"epochs", 1}, {"batch_size", 4}, {"shots_per_class", 4}, {"seeds", {0}}}},
                    {"prompt", {{"context_len", 2}, {"token_dim", 8}}},
                    {"encoder", {{"embed_dim", 8}}},
                    {"loss", {{"anchor_weight", 0.5}}}};
  const std::string cfg_path = c.dir.file("config_ablate_full.json");
  kmat::cli::write_json_file(cfg_path, cfg);

  kmat::cli::AblateOptions opt;
  opt.config_path = cfg_path;
  opt.data_path = c.data_path;
  opt.descriptions_path = c.descriptions_path;
  opt.out_dir = c.dir.file("ablate_full");
  std::ostringstream os;
  const std::vector<kmat::AblationRow> rows = kmat::cli::run_ablate(opt, os);
  REQUIRE(rows.size() == 8);
  CHECK(rows[0].cell.tag() == "0000");
  CHECK(rows[7].cell.tag() == "1111");
  CHECK(parse_file(opt.out_dir + "/ablation.json")["rows"].size() == 8);
}

// ---- binary exit codes --------------------------------------------------------

TEST_CASE("the binary maps outcomes onto exit codes") {
  const oracle::TempDir dir;

  SECTION("successful generation returns zero") {
    const oracle::CliResult r = oracle::run_cli(
        "gen --classes 3 --dim 8 --train 2 --val 1 --test 1 --descriptions 1 --out " +
        dir.file("ok"));
    CHECK(r.code == 0);
    CHECK_THAT(r.output, ContainsSubstring("wrote"));
    CHECK(file_exists(dir.file("ok/manifest.json")));
  }
  SECTION("invalid settings return the config code") {
    const oracle::CliResult r =
        oracle::run_cli("gen --classes 9 --dim 4 --out " + dir.file("cfg"));
    CHECK(r.code == 2);
    CHECK_THAT(r.output, ContainsSubstring("config error"));
  }
  SECTION("missing fixtures return the data code") {
    const oracle::CliResult r =
        oracle::run_cli("train --data " + dir.file("absent.txt") + " --out " + dir.file("d"));
    CHECK(r.code == 3);
    CHECK_THAT(r.output, ContainsSubstring("data error"));
  }
  SECTION("flag parse failures return the config code") {
    CHECK(oracle::run_cli("train").code == 2);       // missing required --out
    CHECK(oracle::run_cli("frobnicate").code == 2);  // unknown subcommand
    CHECK(oracle::run_cli("").code == 2);            // missing subcommand
  }
  SECTION("eval on a missing dump returns the data code") {
    const oracle::CliResult r = oracle::run_cli("eval --params " + dir.file("absent.json"));
    CHECK(r.code == 3);
    CHECK_THAT(r.output, ContainsSubstring("data error"));
  }
}
