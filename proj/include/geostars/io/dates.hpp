#pragma once

#include <chrono>
#include <cstdio>
#include <string>

#include "geostars/error.hpp"

namespace geostars {

using Day = std::chrono::sys_days;

/// Parses YYYY-MM-DD.
inline Day parse_date(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  if (s.size() != 10 || std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3) {
    throw DataError("bad ISO-8601 date '" + s + "'");
  }
  std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw DataError("invalid calendar date '" + s + "'");
  return Day(ymd);
}

inline std::string format_date(Day day) {
  std::chrono::year_month_day ymd{day};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

inline long days_between(Day a, Day b) { return static_cast<long>((b - a).count()); }

/// Zero-based day of year (0..365).
inline int day_of_year(Day day) {
  std::chrono::year_month_day ymd{day};
  Day jan1{ymd.year() / std::chrono::January / 1};
  return static_cast<int>((day - jan1).count());
}

}  // namespace geostars
