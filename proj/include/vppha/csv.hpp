#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "vppha/core_process.hpp"

namespace vppha {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace csv {

/// Shortest decimal representation that parses back to the same double.
inline std::string format(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("not a number: '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("not an integer: '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

/// Reads header + rows; blank lines are skipped.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw ParseError("missing column '" + std::string(name) + "'");
  }
};

inline Table read_table(std::istream& in) {
  Table t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto fields = split(line);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != t.header.size())
      throw ParseError("row has " + std::to_string(fields.size()) + " fields, expected " +
                       std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  if (!have_header) throw ParseError("empty CSV");
  return t;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

}  // namespace csv

/// Long-format CSV: scenario,prob,t,channel,value
inline void write_scenario_csv(std::ostream& out, const ScenarioProcess& x) {
  out << "scenario,prob,t,channel,value\n";
  for (std::size_t s = 0; s < x.scenarios(); ++s)
    for (std::size_t k = 0; k < x.steps(); ++k)
      for (std::size_t i = 0; i < x.channels(); ++i)
        out << s << ',' << csv::format(x.prob(s)) << ',' << csv::format(x.grid().at(k)) << ',' << i
            << ',' << csv::format(x(s, k, i)) << '\n';
}

/// Inverse of write_scenario_csv. The step length cannot always be recovered
/// from the printed times, so callers pass it when known.
inline ScenarioProcess read_scenario_csv(std::istream& in, std::optional<double> dt = std::nullopt) {
  auto table = csv::read_table(in);
  const auto cs = table.column("scenario"), cp = table.column("prob"), ct = table.column("t"),
             cc = table.column("channel"), cv = table.column("value");
  std::map<long long, double> prob;
  std::map<double, std::size_t> times;
  long long max_channel = -1;
  for (const auto& r : table.rows) {
    prob[csv::parse_int(r[cs])] = csv::parse_double(r[cp]);
    times.emplace(csv::parse_double(r[ct]), 0);
    max_channel = std::max(max_channel, csv::parse_int(r[cc]));
  }
  if (table.rows.empty()) throw ParseError("scenario CSV has no rows");
  std::size_t idx = 0;
  for (auto& [t, j] : times) j = idx++;
  const std::size_t S = prob.size(), K = times.size(), d = static_cast<std::size_t>(max_channel + 1);
  if (table.rows.size() != S * K * d) throw ParseError("scenario CSV is not a full S x K x d grid");
  double step = dt.value_or(K > 1 ? std::next(times.begin())->first - times.begin()->first : 1.0);
  TimeGrid grid(times.begin()->first, step, K);
  std::vector<double> probs;
  std::map<long long, std::size_t> sidx;
  for (auto& [s, p] : prob) {
    sidx[s] = probs.size();
    probs.push_back(p);
  }
  std::vector<double> values(S * K * d, 0.0);
  for (const auto& r : table.rows) {
    const auto s = sidx.at(csv::parse_int(r[cs]));
    const auto k = times.at(csv::parse_double(r[ct]));
    const auto i = static_cast<std::size_t>(csv::parse_int(r[cc]));
    values[(s * K + k) * d + i] = csv::parse_double(r[cv]);
  }
  return ScenarioProcess(grid, d, std::move(probs), std::move(values));
}

}  // namespace vppha
