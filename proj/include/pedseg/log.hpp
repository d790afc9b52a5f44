#pragma once

#include <iostream>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

namespace pedseg {

enum class LogLevel { Debug, Info, Warning, Error };

inline const char* to_string(LogLevel l) {
  switch (l) {
    case LogLevel::Debug: return "debug";
    case LogLevel::Info: return "info";
    case LogLevel::Warning: return "warning";
    case LogLevel::Error: return "error";
  }
  return "info";
}

/// Line-delimited JSON log sink. Defaults to stderr.
struct LogSink {
  std::ostream* stream = &std::cerr;
  LogLevel min_level = LogLevel::Info;
  std::mutex mutex;
};

inline LogSink& log_sink() {
  static LogSink sink;
  return sink;
}

inline void log(LogLevel level, const std::string& event, nlohmann::ordered_json fields = nlohmann::ordered_json::object()) {
  LogSink& s = log_sink();
  if (s.stream == nullptr || level < s.min_level) return;
  nlohmann::ordered_json j;
  j["level"] = to_string(level);
  j["event"] = event;
  for (auto& [k, v] : fields.items()) j[k] = v;
  std::lock_guard lock(s.mutex);
  *s.stream << j.dump() << '\n';
  s.stream->flush();
}

inline void log_info(const std::string& event, nlohmann::ordered_json fields = nlohmann::ordered_json::object()) {
  log(LogLevel::Info, event, std::move(fields));
}

inline void log_warning(const std::string& event, nlohmann::ordered_json fields = nlohmann::ordered_json::object()) {
  log(LogLevel::Warning, event, std::move(fields));
}

}  // namespace pedseg
