#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mobtool/core.hpp"

namespace mobtool::sim {

using Fields = std::vector<std::pair<std::string, std::string>>;

struct TraceRecord {
  SimTime ts = 0;
  std::uint64_t seq = 0;
  std::string node;
  std::string kind;
  Fields fields;

  /// Value of the first field named `key`, or "" when absent.
  std::string get(std::string_view key) const;
  bool has(std::string_view key) const;
  bool operator==(const TraceRecord&) const = default;
};

/// Splits "a=1 b=two words c=3" into fields. A token without '=' is glued
/// onto the previous value with a space.
Fields parse_fields(std::string_view detail);

class Trace {
 public:
  const TraceRecord& add(SimTime ts, std::string node, std::string kind, Fields fields = {});
  const std::vector<TraceRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  /// One record per line: `t=<ms> node=<id> kind=<KIND> k=v...`.
  std::string to_text() const;
  /// JSON document with a `records` array.
  std::string to_json() const;

 private:
  std::vector<TraceRecord> records_;
};

std::string format_record(const TraceRecord& r);
/// Inverse of Trace::to_text. Throws PARSE_ERROR with the line number.
Trace parse_trace_text(std::string_view text);

}  // namespace mobtool::sim
