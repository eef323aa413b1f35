#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tzmm/tmm.hpp"

namespace tzmm {

/// Command-trace log: one JSON line per dispatched command, in dispatch
/// order. Two runs of the same deterministic scenario produce
/// byte-identical logs, which is also how replay is verified.
class TraceRecorder {
 public:
  void attach(Tmm& tmm) {
    tmm.setTraceSink([this](const TmiRequest& req, const TmiResponse& resp) {
      record(req, resp);
    });
  }

  void record(const TmiRequest& req, const TmiResponse& resp) {
    nlohmann::json j;
    j["seq"] = seq_++;
    j["cpu"] = req.cpu;
    j["command"] = req.command;
    j["name"] = tmiCommandName(static_cast<TmiCommand>(req.command));
    j["args"] = req.args;
    j["status"] = static_cast<u64>(resp.status);
    j["results"] = resp.results;
    lines_.push_back(j.dump());
  }

  const std::vector<std::string>& lines() const { return lines_; }

  void writeTo(const std::string& path) const {
    std::ofstream out(path);
    for (const auto& l : lines_) out << l << "\n";
  }

  std::string joined() const {
    std::string s;
    for (const auto& l : lines_) {
      s += l;
      s += "\n";
    }
    return s;
  }

 private:
  std::vector<std::string> lines_;
  u64 seq_ = 0;
};

}  // namespace tzmm
