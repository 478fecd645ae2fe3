#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "vppha/csv.hpp"

namespace vppha {

/// Wall-clock instant at minute resolution, counted from 1970-01-01T00:00.
struct Timestamp {
  std::int64_t minutes = 0;

  friend auto operator<=>(const Timestamp&, const Timestamp&) = default;
  Timestamp operator+(std::int64_t m) const { return {minutes + m}; }
  std::int64_t operator-(const Timestamp& o) const { return minutes - o.minutes; }

  std::chrono::sys_days day() const {
    using namespace std::chrono;
    auto d = minutes >= 0 ? minutes / 1440 : -((-minutes + 1439) / 1440);
    return sys_days{days{d}};
  }
  int minute_of_day() const { return static_cast<int>(minutes - day().time_since_epoch().count() * 1440); }
  unsigned month() const { return static_cast<unsigned>(std::chrono::year_month_day{day()}.month()); }
  /// 0 = Sunday .. 6 = Saturday
  unsigned weekday() const { return std::chrono::weekday{day()}.c_encoding(); }
  bool weekend() const { return weekday() == 0 || weekday() == 6; }
};

/// Accepts YYYY-MM-DDTHH:MM[:SS] (or a space instead of 'T'); seconds must be 0.
inline Timestamp parse_timestamp(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == 'Z')) s.remove_suffix(1);
  auto num = [&](std::size_t pos, std::size_t len) {
    if (pos + len > s.size()) throw ParseError("bad timestamp '" + std::string(s) + "'");
    return static_cast<int>(csv::parse_int(s.substr(pos, len)));
  };
  if (s.size() < 16 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') || s[13] != ':')
    throw ParseError("bad timestamp '" + std::string(s) + "'");
  using namespace std::chrono;
  year_month_day ymd{year{num(0, 4)}, std::chrono::month{static_cast<unsigned>(num(5, 2))},
                     std::chrono::day{static_cast<unsigned>(num(8, 2))}};
  if (!ymd.ok()) throw ParseError("bad date '" + std::string(s) + "'");
  const int hh = num(11, 2), mm = num(14, 2);
  int ss = 0;
  if (s.size() >= 19 && s[16] == ':') ss = num(17, 2);
  if (hh > 23 || mm > 59 || ss != 0) throw ParseError("bad time of day '" + std::string(s) + "'");
  return {sys_days{ymd}.time_since_epoch().count() * 1440 + hh * 60 + mm};
}

inline std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  year_month_day ymd{t.day()};
  const int mod = t.minute_of_day();
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:00", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), mod / 60, mod % 60);
  return buf;
}

}  // namespace vppha
