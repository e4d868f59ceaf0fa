#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mfam {

// Shortest representation that round-trips the exact double value.
std::string format_double(double v);
double parse_double(std::string_view s, const char* context);
long parse_long(std::string_view s, const char* context);

// Writes to "<path>.partial" and renames on success, so an interrupted run
// never leaves a truncated file under the final name.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view line, char sep);
std::string_view trim(std::string_view s);

}  // namespace mfam
