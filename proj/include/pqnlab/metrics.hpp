#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pqnlab {

// Key order is preserved so emitted records are byte-stable.
using OrderedJson = nlohmann::ordered_json;

// Mean over the finite entries only; NaN when there are none.
double finite_mean(const std::vector<double>& xs);

// Median over the finite entries (average of the middle two for even
// counts); NaN when there are none.
double finite_median(const std::vector<double>& xs);

// Interquartile mean: sort the finite entries, drop floor(n/4) from each
// end, average the rest. Falls back to the plain mean when fewer than 4
// finite entries remain.
double interquartile_mean(const std::vector<double>& xs);

// Shortest decimal form that parses back to the same double. Integral
// values print without a fractional part; non-finite values print as
// "nan" / "inf" / "-inf".
std::string format_number(double v);

// Replaces non-finite numbers with null, recursively, so a dumped record
// re-parses to the stored value.
OrderedJson sanitize_numbers(const OrderedJson& v);

// Append-only JSON-lines writer. Every record needs a string "kind" and an
// integer "step"; steps must strictly increase within each kind. Each
// record is flushed as soon as it is written.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path);
  void write(const OrderedJson& record);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::map<std::string, long long> last_step_;
};

// Parses a JSONL file back into one record per line. Throws on unreadable
// files or malformed lines.
std::vector<OrderedJson> read_jsonl(const std::string& path);

// Plain CSV: one header row then the data rows. Cells are written verbatim,
// so callers keep them free of commas and newlines.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by name; throws when absent.
  size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace pqnlab
