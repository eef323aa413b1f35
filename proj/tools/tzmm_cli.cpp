#include <cctype>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tzmm/bench.hpp"
#include "tzmm/conformance.hpp"
#include "tzmm/scenario.hpp"

namespace {

void writeReport(const std::string& path, const nlohmann::json& j) {
  if (path.empty()) return;
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

std::optional<std::string> readFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Key/token files may be raw binary or hex text.
tzmm::Bytes decodeKeyMaterial(const std::string& raw) {
  std::string hex;
  bool all_hex = true;
  for (char ch : raw) {
    if (std::isspace(static_cast<unsigned char>(ch))) continue;
    if (!std::isxdigit(static_cast<unsigned char>(ch))) {
      all_hex = false;
      break;
    }
    hex.push_back(ch);
  }
  if (all_hex && !hex.empty() && hex.size() % 2 == 0) {
    tzmm::Bytes out(hex.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<tzmm::u8>(
          std::stoul(hex.substr(2 * i, 2), nullptr, 16));
    return out;
  }
  return tzmm::Bytes(raw.begin(), raw.end());
}

int cmdConformance(const std::string& filter, unsigned parallel,
                   const std::string& report_path) {
  tzmm::ConformanceReport rep = tzmm::runConformance(filter, parallel);
  for (const auto& c : rep.cases) {
    const char* verdict = c.skipped ? "SKIP" : (c.passed ? "PASS" : "FAIL");
    std::printf("%-32s %-20s %-4s %s\n", c.id.c_str(), c.category.c_str(),
                verdict, c.detail.c_str());
  }
  std::printf("commands covered: %zu/%zu  guest services covered: %zu/%zu\n",
              rep.tmis.size(), tzmm::allTmiCommands().size(), rep.tsis.size(),
              static_cast<std::size_t>(tzmm::kTsiFunctionCount));
  writeReport(report_path, rep.toJson());
  return rep.all_passed ? 0 : 1;
}

int cmdBench(const std::string& name, const std::string& report_path) {
  tzmm::BenchResult r = tzmm::runBench(name);
  std::printf("%-8s %s %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
              r.detail.c_str());
  std::printf("%s\n", r.report.dump(2).c_str());
  nlohmann::json j;
  j["name"] = r.name;
  j["passed"] = r.passed;
  j["detail"] = r.detail;
  j["report"] = r.report;
  writeReport(report_path, j);
  return r.passed ? 0 : 1;
}

int cmdRun(const std::string& path, std::optional<tzmm::u64> seed,
           const std::string& policy, const std::string& report_path,
           const std::string& trace_path) {
  tzmm::Scenario s;
  try {
    s = tzmm::loadScenario(path);
  } catch (const tzmm::ParseError& e) {
    std::fprintf(stderr, "parse error at %s: %s\n", e.field.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  if (seed) s.seed = *seed;
  if (policy == "direct") s.policy = tzmm::MappingPolicy::Direct;
  if (policy == "dynamic") s.policy = tzmm::MappingPolicy::Dynamic;
  if (!policy.empty()) s.host_policy.sync_policy = s.policy;

  tzmm::ScenarioResult res = tzmm::runScenario(s);
  std::printf("%s\n", res.report.dump(2).c_str());
  writeReport(report_path, res.report);
  if (!trace_path.empty()) {
    std::ofstream out(trace_path);
    for (const auto& l : res.trace_lines) out << l << "\n";
  }
  return res.passed ? 0 : 1;
}

int cmdAttestVerify(const std::string& token_path,
                    const std::string& rak_pub_path) {
  auto tok = readFile(token_path);
  if (!tok) {
    std::fprintf(stderr, "cannot read token file %s\n", token_path.c_str());
    return 1;
  }
  auto pub = readFile(rak_pub_path);
  if (!pub) {
    std::fprintf(stderr, "cannot read key file %s\n", rak_pub_path.c_str());
    return 1;
  }
  tzmm::VerifyResult v =
      tzmm::verifyToken(decodeKeyMaterial(*tok), decodeKeyMaterial(*pub),
                        std::nullopt, std::nullopt);
  std::printf("%s\n", tzmm::verifyResultName(v));
  return v == tzmm::VerifyResult::Accept ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic confidential-VM monitor model: conformance "
               "suite, latency benchmarks, scenario runner, token verifier"};
  app.require_subcommand(1);

  std::string report_path, trace_path, filter, bench_name, scenario_path;
  std::string policy, token_path, rak_pub_path;
  unsigned parallel = 0;
  std::optional<tzmm::u64> seed;

  auto* conf = app.add_subcommand("conformance", "run the conformance suite");
  conf->add_option("--filter", filter, "only run one case category");
  conf->add_option("--parallel-cpus", parallel,
                   "dispatcher threads for the race cases (0 = single-threaded)");
  conf->add_option("--report", report_path, "write a JSON report here");

  auto* bench = app.add_subcommand("bench", "run one latency benchmark");
  bench->add_option("name", bench_name, "hvc, ipi, io, or memcpy")->required();
  bench->add_option("--report", report_path, "write a JSON report here");

  auto* run = app.add_subcommand("run", "execute a scenario file");
  run->add_option("scenario", scenario_path, "scenario JSON file")->required();
  tzmm::u64 seed_raw = 0;
  auto* seed_opt = run->add_option("--seed", seed_raw, "override the scenario seed");
  run->add_option("--policy", policy, "override the mapping policy")
      ->check(CLI::IsMember({"direct", "dynamic"}));
  run->add_option("--report", report_path, "write a JSON report here");
  run->add_option("--trace", trace_path, "write the command trace here (JSON lines)");

  auto* attest = app.add_subcommand("attest", "attestation utilities");
  auto* verify = attest->add_subcommand("verify", "verify a token");
  verify->add_option("token", token_path, "token file (binary or hex)")->required();
  verify->add_option("rak-pub", rak_pub_path, "trusted platform public key")
      ->required();
  attest->require_subcommand(1);

  CLI11_PARSE(app, argc, argv);

  if (conf->parsed()) return cmdConformance(filter, parallel, report_path);
  if (bench->parsed()) return cmdBench(bench_name, report_path);
  if (run->parsed()) {
    if (seed_opt->count() > 0) seed = seed_raw;
    return cmdRun(scenario_path, seed, policy, report_path, trace_path);
  }
  if (attest->parsed()) return cmdAttestVerify(token_path, rak_pub_path);
  return 1;
}
