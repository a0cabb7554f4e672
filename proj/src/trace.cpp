#include "mobtool/trace.hpp"

#include <json.hpp>
#include <sstream>

#include "mobtool/text.hpp"

namespace mobtool::sim {

std::string TraceRecord::get(std::string_view key) const {
  for (const auto& [k, v] : fields)
    if (k == key) return v;
  return {};
}

bool TraceRecord::has(std::string_view key) const {
  for (const auto& [k, v] : fields)
    if (k == key) return true;
  return false;
}

Fields parse_fields(std::string_view detail) {
  Fields out;
  for (auto w : text::words(detail)) {
    auto eq = w.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      if (out.empty())
        out.emplace_back("detail", std::string(w));
      else
        out.back().second += " " + std::string(w);
      continue;
    }
    out.emplace_back(std::string(w.substr(0, eq)), std::string(w.substr(eq + 1)));
  }
  return out;
}

const TraceRecord& Trace::add(SimTime ts, std::string node, std::string kind, Fields fields) {
  records_.push_back(TraceRecord{ts, records_.size(), std::move(node), std::move(kind), std::move(fields)});
  return records_.back();
}

std::string format_record(const TraceRecord& r) {
  std::string line = "t=" + std::to_string(r.ts) + " node=" + r.node + " kind=" + r.kind;
  for (const auto& [k, v] : r.fields) line += " " + k + "=" + v;
  return line;
}

std::string Trace::to_text() const {
  std::string out;
  for (const auto& r : records_) {
    out += format_record(r);
    out += '\n';
  }
  return out;
}

std::string Trace::to_json() const {
  auto records = nlohmann::ordered_json::array();
  for (const auto& r : records_) {
    nlohmann::ordered_json fields = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.fields) fields[k] = v;
    records.push_back({{"t", r.ts}, {"seq", r.seq}, {"node", r.node}, {"kind", r.kind}, {"fields", fields}});
  }
  nlohmann::ordered_json doc;
  doc["records"] = records;
  return doc.dump(2) + "\n";
}

Trace parse_trace_text(std::string_view doc) {
  Trace trace;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < doc.size()) {
    auto end = doc.find('\n', start);
    if (end == std::string_view::npos) end = doc.size();
    ++line_no;
    auto line = text::trim(doc.substr(start, end - start));
    start = end + 1;
    if (line.empty()) continue;
    auto fields = parse_fields(line);
    if (fields.size() < 3 || fields[0].first != "t" || fields[1].first != "node" || fields[2].first != "kind")
      throw Error(Errc::PARSE_ERROR, "expected 't=<ms> node=<id> kind=<KIND>'", line_no);
    auto ts = text::to_int<SimTime>(fields[0].second);
    if (!ts) throw Error(Errc::PARSE_ERROR, "bad timestamp", line_no);
    trace.add(*ts, fields[1].second, fields[2].second, Fields(fields.begin() + 3, fields.end()));
  }
  return trace;
}

}  // namespace mobtool::sim
