#include "linearlens/csv.hpp"

#include <cstdio>

#include "linearlens/error.hpp"

namespace linearlens {

namespace {

std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void append_row(std::string& text, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) text += ',';
    text += escape(fields[i]);
  }
  text += '\n';
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) {
  append_row(text_, header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  require(fields.size() == width_, ErrorCode::kInvalidArgument, "CSV row width mismatch");
  append_row(text_, fields);
}

}  // namespace linearlens
