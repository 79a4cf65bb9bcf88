#pragma once

#include <string>
#include <vector>

namespace metakern {

inline constexpr const char* kCsvSchema = "metakern-csv/1";
inline constexpr const char* kJsonSchema = "metakern-json/1";
inline constexpr const char* kTaskSchema = "metakern-tasks/1";

/// Shortest round-trip-safe text for a double: 17 significant digits.
std::string format_double(double v);

std::string csv_line(const std::vector<std::string>& fields);
std::vector<std::string> split_csv_line(const std::string& line);

/// FNV-1a 64-bit, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& text);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace metakern
