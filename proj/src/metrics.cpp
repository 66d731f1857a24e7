#include "pqnlab/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace pqnlab {

namespace {

std::vector<double> finite_sorted(const std::vector<double>& xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs)
    if (std::isfinite(x)) out.push_back(x);
  std::sort(out.begin(), out.end());
  return out;
}

double plain_mean(const std::vector<double>& xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

}  // namespace

double finite_mean(const std::vector<double>& xs) {
  return plain_mean(finite_sorted(xs));
}

double finite_median(const std::vector<double>& xs) {
  const std::vector<double> v = finite_sorted(xs);
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double interquartile_mean(const std::vector<double>& xs) {
  const std::vector<double> v = finite_sorted(xs);
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (v.size() < 4) return plain_mean(v);
  const size_t drop = v.size() / 4;
  double s = 0.0;
  for (size_t i = drop; i < v.size() - drop; ++i) s += v[i];
  return s / double(v.size() - 2 * drop);
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

OrderedJson sanitize_numbers(const OrderedJson& v) {
  if (v.is_number_float() && !std::isfinite(v.get<double>()))
    return nullptr;
  if (v.is_object()) {
    OrderedJson out = OrderedJson::object();
    for (const auto& item : v.items())
      out[item.key()] = sanitize_numbers(item.value());
    return out;
  }
  if (v.is_array()) {
    OrderedJson out = OrderedJson::array();
    for (const auto& e : v) out.push_back(sanitize_numbers(e));
    return out;
  }
  return v;
}

JsonlWriter::JsonlWriter(const std::string& path) : path_(path), out_(path) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path);
}

void JsonlWriter::write(const OrderedJson& record) {
  if (!record.is_object() || !record.contains("kind") ||
      !record["kind"].is_string())
    throw std::invalid_argument("metrics record needs a string 'kind'");
  if (!record.contains("step") || !record["step"].is_number_integer())
    throw std::invalid_argument("metrics record needs an integer 'step'");
  const std::string kind = record["kind"].get<std::string>();
  const long long step = record["step"].get<long long>();
  auto it = last_step_.find(kind);
  if (it != last_step_.end() && step <= it->second)
    throw std::invalid_argument("step " + std::to_string(step) +
                                " does not advance kind '" + kind +
                                "' past " + std::to_string(it->second));
  last_step_[kind] = step;
  out_ << sanitize_numbers(record).dump() << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("write failed: " + path_);
}

std::vector<OrderedJson> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<OrderedJson> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(OrderedJson::parse(line));
  }
  return out;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  for (size_t i = 0; i < header.size(); ++i)
    os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw std::invalid_argument("csv row width " +
                                  std::to_string(row.size()) +
                                  " != header width " +
                                  std::to_string(header.size()));
    for (size_t i = 0; i < row.size(); ++i)
      os << (i ? "," : "") << row[i];
    os << '\n';
  }
  write_text_file(path, os.str());
}

size_t CsvTable::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw std::invalid_argument("csv has no column named '" + name + "'");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  out.push_back(cell);
  return out;
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  CsvTable table;
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("csv is empty: " + path);
  table.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row = split_csv_line(line);
    if (row.size() != table.header.size())
      throw std::runtime_error("csv row width mismatch in " + path);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace pqnlab
