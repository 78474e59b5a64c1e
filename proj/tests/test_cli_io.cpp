#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cli.hpp"
#include "lwf/checkpoint.hpp"
#include "lwf/config.hpp"
#include "lwf/errors.hpp"
#include "lwf/report.hpp"

using namespace lwf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("lwf_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

const char* kTinyConfig = R"({"corpus": {"train": [24, 16, 20, 16], "test": [8, 8, 8, 8]},
  "schedule": [{"name": "warm-up", "lr": 0.01, "epochs": 1}, {"name": "joint", "lr": 0.001, "epochs": 1}],
  "optimizer": {"batch_size": 8}})";

struct Cli {
  int code = 0;
  std::string out, err;
};

Cli invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  Cli r;
  r.code = cli::run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

MultiHeadNet four_head_net() {
  Rng rng(21);
  MultiHeadNet net = build_micro_resnet(TrunkConfig::desk(), rng);
  const std::size_t widths[] = {3, 2, 3, 4};
  for (int t = 1; t <= 4; ++t) net.append_head(t, widths[t - 1], rng);
  return net;
}

}  // namespace

TEST_SUITE("cli_io") {

TEST_CASE("config parsing and validation") {
  const ExperimentConfig def;
  CHECK_NOTHROW(def.validate());
  const nlohmann::json j = config_to_json(def);
  CHECK(config_to_json(config_from_json(j)) == j);

  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"bogus": 1})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"corpus": {"size": 3}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"seed": "seven"})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"schedule": "weekly"})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"strategy": "ewc"})")), ConfigError);

  const ExperimentConfig desk = config_from_json(nlohmann::json::parse(R"({"schedule": "desk", "seed": 3})"));
  CHECK(desk.train.schedule == make_schedule(SchedulePreset::Desk));
  CHECK(desk.seed == 3);
  CHECK(config_hash(desk) != config_hash(def));
  CHECK(config_hash(desk) == config_hash(config_from_json(config_to_json(desk))));

  ExperimentConfig bad;
  bad.train.distill.temperature = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.train.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ExperimentConfig paper;
  paper.apply_paper_scale();
  CHECK(paper.train.schedule.total_epochs() == 100);
  CHECK(paper.corpus.sizes.train == CorpusSizes::paper().train);

  TempDir dir("config");
  try {
    load_config(dir.path / "absent.json");
    FAIL("no error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("absent.json") != std::string::npos);
  }
  write(dir.path / "broken.json", "{\"seed\": ");
  CHECK_THROWS_AS(load_config(dir.path / "broken.json"), ConfigError);
}

TEST_CASE("checkpoint round trip and corruption") {
  MultiHeadNet net = four_head_net();
  Rng rng(99);
  rng.next_u64();
  const auto bytes = encode_checkpoint(net, rng, 0xabcdef);
  Checkpoint back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back.net, back.rng, back.config_hash) == bytes);
  CHECK(back.config_hash == 0xabcdef);
  CHECK(back.rng.next_u64() == rng.next_u64());

  REQUIRE(back.net.heads().size() == 4);
  const std::size_t widths[] = {3, 2, 3, 4};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.net.heads()[i].task_id == static_cast<int>(i + 1));
    CHECK(back.net.heads()[i].class_count == widths[i]);
  }
  const auto a = net.parameters(), b = back.net.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->same_values(*b[i]));
  const auto ba = net.buffers(), bb = back.net.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(ba[i]->same_values(*bb[i]));

  auto version = bytes;
  version[4] += 1;
  CHECK_THROWS_AS(decode_checkpoint(version), VersionError);
  auto magic = bytes;
  magic[0] ^= 0xff;
  CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), IntegrityError);
  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(6)), IntegrityError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(flipped), IntegrityError);

  TempDir dir("ckpt");
  save_checkpoint(net, dir.path / "m.clwf", rng, 5);
  const Checkpoint loaded = load_checkpoint(dir.path / "m.clwf");
  CHECK(loaded.config_hash == 5);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.clwf"), DataError);
}

TEST_CASE("exit codes") {
  TempDir dir("exit");
  CHECK(invoke({"--help"}).code == cli::kExitOk);
  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"train", "--no-such-flag"}).code == cli::kExitUsage);
  CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);

  const Cli missing = invoke({"train", "--config", (dir.path / "nope.json").string()});
  CHECK(missing.code == cli::kExitConfig);
  CHECK(missing.err.find("nope.json") != std::string::npos);
  CHECK(invoke({"train", "--temperature", "0", "--out", (dir.path / "t").string()}).code == cli::kExitConfig);
  CHECK(invoke({"compare", "--strategy", "bogus"}).code == cli::kExitConfig);

  write(dir.path / "junk.clwf", "CLWF garbage");
  write(dir.path / "cfg.json", kTinyConfig);
  const Cli bad_ckpt = invoke({"add-task", "--config", (dir.path / "cfg.json").string(), "--checkpoint",
                            (dir.path / "junk.clwf").string(), "--task", "2", "--out", (dir.path / "a").string()});
  CHECK(bad_ckpt.code == cli::kExitRun);
  CHECK_FALSE(bad_ckpt.err.empty());
}

TEST_CASE("train, add-task, manifest rerun and report") {
  TempDir dir("pipeline");
  const fs::path cfg = dir.path / "cfg.json";
  write(cfg, kTinyConfig);

  REQUIRE(invoke({"generate-data", "--config", cfg.string(), "--seed", "4", "--out", (dir.path / "data").string()}).code ==
          cli::kExitOk);
  const fs::path corpus = dir.path / "data" / "corpus.clds";
  REQUIRE(fs::exists(corpus));
  const std::string corpus_bytes = slurp(corpus);

  const fs::path t1 = dir.path / "t1";
  const Cli train = invoke({"train", "--config", cfg.string(), "--data", corpus.string(), "--task", "3", "--seed", "2",
                         "--out", t1.string()});
  REQUIRE(train.code == cli::kExitOk);
  for (const char* f : {"model.clwf", "metrics.csv", "manifest.json"}) CHECK(fs::exists(t1 / f));
  CHECK(slurp(corpus) == corpus_bytes);

  const Checkpoint first = load_checkpoint(t1 / "model.clwf");
  CHECK(first.net.heads().size() == 1);
  CHECK(first.net.heads()[0].task_id == 3);

  const fs::path t2 = dir.path / "t2";
  REQUIRE(invoke({"add-task", "--config", cfg.string(), "--data", corpus.string(), "--checkpoint",
               (t1 / "model.clwf").string(), "--task", "1", "--strategy", "cldrm", "--out", t2.string()})
              .code == cli::kExitOk);
  const Checkpoint second = load_checkpoint(t2 / "model.clwf");
  REQUIRE(second.net.heads().size() == 2);
  CHECK(second.net.heads()[1].task_id == 1);
  CHECK(slurp(corpus) == corpus_bytes);
  CHECK(slurp(t1 / "model.clwf") == slurp(t1 / "model.clwf"));

  const fs::path rerun = dir.path / "rerun";
  REQUIRE(invoke({"train", "--config", (t1 / "manifest.json").string(), "--out", rerun.string()}).code == cli::kExitOk);
  CHECK(slurp(rerun / "metrics.csv") == slurp(t1 / "metrics.csv"));
  CHECK(slurp(rerun / "model.clwf") == slurp(t1 / "model.clwf"));

  const auto manifest = nlohmann::json::parse(slurp(t1 / "manifest.json"));
  CHECK(manifest.at("command") == "train");
  CHECK(manifest.at("args").at("task") == 3);
  CHECK(manifest.at("config").at("seed") == 2);
  CHECK(slurp(t1 / "metrics.csv").find("cldrm_3_T2_s2,") != std::string::npos);
  CHECK(manifest.at("artifacts").contains("metrics.csv"));

  REQUIRE(invoke({"report", "--in", t1.string()}).code == cli::kExitOk);
  bool svg = false;
  for (const auto& entry : fs::recursive_directory_iterator(t1 / "report")) {
    if (entry.path().extension() == ".svg") {
      svg = true;
      const std::string text = slurp(entry.path());
      CHECK(text.find("<svg") != std::string::npos);
      CHECK(text.find("</svg>") != std::string::npos);
    }
  }
  CHECK(svg);
  CHECK(fs::exists(t1 / "report" / "summary.md"));
}

TEST_CASE("metrics csv parser") {
  const std::string ok = std::string(kMetricsHeader) + "\nfine-tuning_1-2_s7,fine-tuning,1-2,0,7,3,1,test,81.25\n";
  const auto rows = parse_metrics_csv(ok);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].epoch == 3);
  CHECK(rows[0].accuracy == 81.25);
  CHECK_THROWS_AS(parse_metrics_csv("a,b\n1,2\n"), DataError);
  CHECK_THROWS_AS(parse_metrics_csv(std::string(kMetricsHeader) + "\nx,y\n"), DataError);

  LineChart chart{"acc", "epoch", "%", {{"task 1", {{0, 50}, {1, 60}}}}};
  const std::string svg = render_svg(chart);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("task 1") != std::string::npos);
}

}  // TEST_SUITE
