#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "pqnlab/agents.hpp"
#include "pqnlab/harness.hpp"
#include "pqnlab/metrics.hpp"
#include "pqnlab/plot.hpp"

using namespace pqnlab;

namespace {

const double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fresh_dir(const std::string& tag) {
  const auto p = std::filesystem::temp_directory_path() /
                 ("pqnlab_harness_" + tag + "_" +
                  std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

int run_main(std::vector<std::string> args) {
  args.insert(args.begin(), "pqnlab");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return harness_main(int(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("config reader parses values, defaults, and comments") {
  ConfigReader cfg = ConfigReader::from_string(
      "gamma = 0.5   # discount\n"
      "\n"
      "trials=25\n"
      "widths = 16, 64,256\n"
      "flag = true\n"
      "label = hello\n");
  CHECK(cfg.get_double("gamma", 0.99) == 0.5);
  CHECK(cfg.get_int("trials", 1) == 25);
  CHECK(cfg.get_int_list("widths", {}) == std::vector<long>{16, 64, 256});
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_string("label", "x") == "hello");
  CHECK(cfg.get_int("absent", 7) == 7);
  CHECK_FALSE(cfg.has("absent"));
  CHECK_NOTHROW(cfg.finish());
}

TEST_CASE("config echo round-trips through the parser") {
  ConfigReader cfg = ConfigReader::from_string(
      "lr = 0.00025\nwidths = 16, 64\nflag = 1\nname = net_a\n");
  cfg.get_double("lr", 0.0);
  cfg.get_int_list("widths", {});
  cfg.get_bool("flag", false);
  cfg.get_string("name", "");
  cfg.get_int("extra", 42);
  const std::string echo = cfg.echo();

  ConfigReader again = ConfigReader::from_string(echo);
  CHECK(again.get_double("lr", 0.0) == 0.00025);
  CHECK(again.get_int_list("widths", {}) == std::vector<long>{16, 64});
  CHECK(again.get_bool("flag", false));
  CHECK(again.get_string("name", "") == "net_a");
  CHECK(again.get_int("extra", 0) == 42);
  CHECK(again.echo() == echo);
}

TEST_CASE("config errors carry the origin, line, and offending text") {
  CHECK_THROWS_WITH_AS(ConfigReader::from_string("a = 1\na = 2\n", "f.cfg"),
                       doctest::Contains("duplicate key 'a'"), ConfigError);
  CHECK_THROWS_WITH_AS(ConfigReader::from_string("Bad = 1\n", "f.cfg"),
                       doctest::Contains("invalid key"), ConfigError);
  CHECK_THROWS_WITH_AS(ConfigReader::from_string("novalue\n", "f.cfg"),
                       doctest::Contains("f.cfg:1"), ConfigError);

  ConfigReader cfg = ConfigReader::from_string("trials = abc\n", "f.cfg");
  CHECK_THROWS_WITH_AS(cfg.get_int("trials", 1),
                       doctest::Contains("needs an integer"), ConfigError);

  ConfigReader cfg2 = ConfigReader::from_string("mystery = 3\n", "f.cfg");
  cfg2.get_int("known", 1);
  CHECK_THROWS_WITH_AS(cfg2.finish(),
                       doctest::Contains("unknown key(s): mystery"),
                       ConfigError);
}

TEST_CASE("minibatch count that does not divide the rollout names both") {
  PqnConfig cfg;
  cfg.num_envs = 128;
  cfg.num_steps = 16;
  cfg.num_minibatches = 7;
  CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("7"));
  CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("2048"));
}

TEST_CASE("robust aggregates match hand-computed values") {
  CHECK(finite_mean({1, 2, 3, kNan}) == 2.0);
  CHECK(std::isnan(finite_mean({kNan, kNan})));
  CHECK(finite_median({3, 1, 2}) == 2.0);
  CHECK(finite_median({1, 2, 3, 4}) == 2.5);
  // n = 4: drop one from each end.
  CHECK(interquartile_mean({4, 1, 2, 3}) == 2.5);
  // n = 5: drop one from each end, average the middle three.
  CHECK(interquartile_mean({5, 1, 2, 3, 4}) == 3.0);
  // fewer than 4 finite values: plain mean.
  CHECK(interquartile_mean({1, 2, 30}) == 11.0);
  CHECK(interquartile_mean({1, 2, 3, 100, kNan}) == 2.5);
  CHECK(std::isnan(interquartile_mean({})));
}

TEST_CASE("numbers print in shortest round-trip form") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(2.5e-4) == "0.00025");
  CHECK(format_number(-3.0) == "-3");
  CHECK(format_number(kNan) == "nan");
  CHECK(format_number(std::numeric_limits<double>::infinity()) == "inf");
  for (double v : {1.0 / 3.0, 0.3823139816772034, 1e300, -7.25e-12}) {
    CHECK(std::stod(format_number(v)) == v);
  }
}

TEST_CASE("jsonl writer enforces per-kind step monotonicity and nan -> null") {
  const std::string dir = fresh_dir("jsonl");
  const std::string path = dir + "/m.jsonl";
  {
    JsonlWriter w(path);
    OrderedJson a;
    a["kind"] = "train";
    a["step"] = 1;
    a["loss"] = kNan;
    w.write(a);
    OrderedJson b;
    b["kind"] = "eval";
    b["step"] = 1;  // separate kind, separate counter
    b["x"] = 2.0;
    w.write(b);
    a["step"] = 5;
    w.write(a);
    a["step"] = 5;
    CHECK_THROWS_AS(w.write(a), std::invalid_argument);
  }
  const auto recs = read_jsonl(path);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0]["loss"].is_null());
  CHECK(recs[1]["kind"] == "eval");
  CHECK(recs[2]["step"] == 5);
}

TEST_CASE("csv files round-trip and reject ragged rows") {
  const std::string dir = fresh_dir("csv");
  const std::string path = dir + "/t.csv";
  write_csv(path, {"a", "b"}, {{"1", "x"}, {"2", "y"}});
  const CsvTable t = read_csv(path);
  CHECK(t.header == std::vector<std::string>{"a", "b"});
  REQUIRE(t.column("b") == 1);
  CHECK(t.rows[0][t.column("b")] == "x");
  CHECK(t.rows[1][t.column("b")] == "y");
  CHECK_THROWS_AS(t.column("c"), std::invalid_argument);
  CHECK_THROWS_AS(write_csv(path, {"a", "b"}, {{"1"}}),
                  std::invalid_argument);
}

TEST_CASE("line plots render deterministically with edge cases handled") {
  PlotSpec spec;
  spec.title = "t";
  CHECK(render_line_plot(spec, {}).find("no data") != std::string::npos);

  PlotSeries single{"one", {1.0}, {2.0}, false};
  const std::string svg1 = render_line_plot(spec, {single});
  CHECK(svg1.find("<circle") != std::string::npos);
  CHECK(render_line_plot(spec, {single}) == svg1);

  // a nan splits the polyline into two segments
  PlotSeries split{"s", {0, 1, 2, 3}, {1.0, kNan, 2.0, 3.0}, false};
  const std::string svg2 = render_line_plot(spec, {split});
  CHECK(std::count(svg2.begin(), svg2.end(), '\n') > 10);
}

TEST_CASE("aggregate series averages y by distinct x") {
  PlotSeries a{"a", {0, 1, 2}, {1.0, 2.0, 3.0}, false};
  PlotSeries b{"b", {1, 2}, {4.0, 5.0}, false};
  const PlotSeries m = aggregate_mean_series({a, b}, "mean");
  CHECK(m.label == "mean");
  CHECK(m.x == std::vector<double>{0, 1, 2});
  CHECK(m.y == std::vector<double>{1.0, 3.0, 4.0});
  CHECK(m.emphasis);
}

TEST_CASE("divergence preset passes and writes every artifact") {
  const std::string dir = fresh_dir("baird");
  RunOptions opt;
  opt.subcommand = "baird";
  opt.out_dir = dir;
  CHECK(run_experiment(opt) == 0);
  for (const std::string f :
       {"verdict.txt", "config_effective.txt", "metrics_seed1.jsonl",
        "aggregate.csv", "plot_td_norm.svg", "plot_param_norm.svg"}) {
    INFO(f);
    CHECK(std::filesystem::exists(dir + "/" + f));
  }
  const std::string verdict = read_text_file(dir + "/verdict.txt");
  CHECK(verdict.find("VERDICT: PASS") != std::string::npos);
  CHECK(verdict.find("param_norm_growth") != std::string::npos);
}

TEST_CASE("reruns with the same config and seeds are bit-identical") {
  const std::string d1 = fresh_dir("rerun1");
  const std::string d2 = fresh_dir("rerun2");
  for (const std::string* d : {&d1, &d2}) {
    RunOptions opt;
    opt.subcommand = "probe-thm1";
    opt.out_dir = *d;
    CHECK(run_experiment(opt) == 0);
  }
  for (const std::string f : {"metrics_seed1.jsonl", "aggregate.csv",
                              "probe_rows_seed1.csv", "probe_summary.json",
                              "plot_probe.svg", "verdict.txt"}) {
    INFO(f);
    CHECK(read_text_file(d1 + "/" + f) == read_text_file(d2 + "/" + f));
  }
}

TEST_CASE("cli exit codes: pass 0, failed check 1, bad input 2") {
  const std::string dir = fresh_dir("cli");
  CHECK(run_main({"baird", "--out", dir + "/ok"}) == 0);

  // an absurd growth requirement turns the same run into a failed check
  write_text_file(dir + "/hard.cfg", "growth_factor = 1e300\n");
  CHECK(run_main({"baird", "--config", dir + "/hard.cfg", "--out",
                  dir + "/hard"}) == 1);
  const std::string verdict = read_text_file(dir + "/hard/verdict.txt");
  CHECK(verdict.find("VERDICT: FAIL") != std::string::npos);

  CHECK(run_main({"bogus", "--out", dir + "/b"}) == 2);
  write_text_file(dir + "/bad.cfg", "no_such_key = 1\n");
  CHECK(run_main({"baird", "--config", dir + "/bad.cfg", "--out",
                  dir + "/c"}) == 2);
  write_text_file(dir + "/worse.cfg", "sweeps = eleven\n");
  CHECK(run_main({"baird", "--config", dir + "/worse.cfg", "--out",
                  dir + "/d"}) == 2);
  CHECK(run_main({"baird", "--variant", "cubist", "--out", dir + "/e"}) == 2);
  CHECK(run_main({"baird", "--seeds", "1,zebra", "--out", dir + "/f"}) == 2);
}

TEST_CASE("effective config records the preset defaults it ran with") {
  const std::string dir = fresh_dir("effcfg");
  RunOptions opt;
  opt.subcommand = "probe-thm2";
  opt.out_dir = dir;
  opt.seeds = {3};
  ConfigReader cfg = ConfigReader::from_string("trials = 50\n");
  // run through the file path to exercise from_file too
  write_text_file(dir + "/c.cfg", "trials = 50\n");
  opt.config_path = dir + "/c.cfg";
  CHECK(run_experiment(opt) == 0);
  const std::string eff = read_text_file(dir + "/config_effective.txt");
  CHECK(eff.find("trials = 50") != std::string::npos);
  CHECK(eff.find("widths = 16,64,256,1024") != std::string::npos);
  CHECK(eff.find("# seeds = 3") != std::string::npos);
  CHECK(std::filesystem::exists(dir + "/metrics_seed3.jsonl"));
}
