#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "tzmm/bench.hpp"
#include "tzmm/conformance.hpp"

using namespace tzmm;

TEST_CASE("the full suite passes with complete command coverage") {
  ConformanceReport rep = runConformance("", 0);
  for (const auto& c : rep.cases) {
    INFO(c.id << ": " << c.detail);
    CHECK((c.passed || c.skipped));
  }
  CHECK(rep.all_passed);
  CHECK(rep.cases.size() >= 18);
  CHECK(rep.tmi_coverage_complete);
  CHECK(rep.tsi_coverage_complete);
  CHECK(rep.tmis.size() == allTmiCommands().size());
  CHECK(rep.tsis.size() == kTsiFunctionCount);

  std::set<std::string> categories;
  for (const auto& c : rep.cases) categories.insert(c.category);
  CHECK(categories.size() == 7);
}

TEST_CASE("race cases skip with a reason unless a parallel driver is given") {
  ConformanceReport rep = runConformance("race", 0);
  REQUIRE(rep.cases.size() >= 2);
  for (const auto& c : rep.cases) {
    CHECK(c.skipped);
    CHECK_FALSE(c.detail.empty());
  }
}

TEST_CASE("race cases run and pass under a parallel driver") {
  ConformanceReport rep = runConformance("race", 4);
  REQUIRE(rep.cases.size() >= 2);
  for (const auto& c : rep.cases) {
    INFO(c.id << ": " << c.detail);
    CHECK(c.passed);
    CHECK_FALSE(c.skipped);
  }
}

TEST_CASE("category filters select exactly that category") {
  ConformanceReport rep = runConformance("ttt-levels", 0);
  REQUIRE_FALSE(rep.cases.empty());
  for (const auto& c : rep.cases) CHECK(c.category == "ttt-levels");
  CHECK(rep.all_passed);
}

TEST_CASE("the report serialization carries the pass/fail verdicts") {
  ConformanceReport rep = runConformance("input-sanity", 0);
  json j = rep.toJson();
  REQUIRE(j.contains("cases"));
  CHECK(j["cases"].size() == rep.cases.size());
  CHECK(j.contains("all_passed"));
}

TEST_CASE("all four benchmarks pass") {
  for (const char* name : {"hvc", "ipi", "io", "memcpy"}) {
    BenchResult r = runBench(name);
    INFO(r.name << ": " << r.detail);
    CHECK(r.passed);
  }
  CHECK_FALSE(runBench("nope").passed);
}
