#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqnlab {

// Anything that should terminate with the usage/config exit status.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key=value configuration: one pair per line, '#' starts a comment,
// blank lines are ignored. Typed getters fill defaults and record every
// effective value; echo() lists them sorted so the echo file re-parses to
// the identical configuration; finish() rejects any file key no getter ever
// consulted (typo protection).
class ConfigReader {
 public:
  ConfigReader() = default;
  static ConfigReader from_file(const std::string& path);
  static ConfigReader from_string(const std::string& text,
                                  const std::string& origin = "<inline>");

  long get_int(const std::string& key, long def);
  double get_double(const std::string& key, double def);
  bool get_bool(const std::string& key, bool def);
  std::string get_string(const std::string& key, const std::string& def);
  // Comma-separated integers, e.g. "8,64,512".
  std::vector<long> get_int_list(const std::string& key,
                                 const std::vector<long>& def);

  bool has(const std::string& key) const { return raw_.count(key) > 0; }
  void finish() const;        // throws ConfigError on never-consumed keys
  std::string echo() const;   // sorted "key = value" lines

 private:
  struct Raw {
    std::string value;
    int line = 0;
  };
  const Raw* fetch(const std::string& key);
  [[noreturn]] void fail(const std::string& key, const Raw& raw,
                         const std::string& want) const;

  std::string origin_ = "<defaults>";
  std::map<std::string, Raw> raw_;
  std::set<std::string> used_;
  std::map<std::string, std::string> effective_;
};

struct RunOptions {
  std::string subcommand;
  std::string variant;              // "" = subcommand default
  std::string config_path;          // "" = all defaults
  std::vector<std::uint64_t> seeds; // empty = subcommand default
  std::string out_dir;
};

// Runs one preset, writing config_effective.txt, per-seed metrics JSONL,
// aggregate.csv, verdict.txt, SVG plots (and probe CSV/JSON for probe
// subcommands) into opt.out_dir. Returns 0 when every verdict check passed,
// 1 otherwise. Throws ConfigError for invalid configs or options.
int run_experiment(const RunOptions& opt);

// Full command-line front end: exit 0 = checks passed, 1 = a check failed,
// 2 = usage or configuration error.
int harness_main(int argc, char** argv);

}  // namespace pqnlab
