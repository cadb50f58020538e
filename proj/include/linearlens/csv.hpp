#pragma once

#include <string>
#include <vector>

namespace linearlens {

/// Round-trippable decimal text for a double (%.17g).
std::string format_number(double v);

/// Minimal CSV builder; fields containing a comma or quote are quoted.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string>& fields);
  const std::string& str() const noexcept { return text_; }

 private:
  std::size_t width_;
  std::string text_;
};

}  // namespace linearlens
