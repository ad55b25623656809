#include <gtest/gtest.h>

#include "stydesty/gradcheck_suite.hpp"

namespace stydesty {
namespace {

const SuiteRow& row(const SuiteReport& rep, const std::string& name, const std::string& dtype) {
  for (const auto& r : rep.rows) {
    if (r.name == name && r.dtype == dtype) return r;
  }
  throw std::runtime_error("missing row " + name);
}

TEST(GradcheckSuite, EveryOpPassesAtBothPrecisions) {
  SuiteOptions opt;
  opt.scope = "ops";
  const auto rep = run_gradcheck_suite(opt);
  std::cout << rep.table();
  EXPECT_EQ(rep.rows.size(), 2 * gradcheck_op_names().size());
  for (const auto& r : rep.rows) {
    EXPECT_TRUE(r.pass) << r.name << " " << r.dtype << " rel " << r.max_rel_error;
    EXPECT_EQ(r.geometries, 20);
    EXPECT_GT(r.probes, 0) << r.name;
  }
}

TEST(GradcheckSuite, CompositesMatchFloat64Replica) {
  SuiteOptions opt;
  opt.scope = "composites";
  opt.composite_geometries = 2;
  const auto rep = run_gradcheck_suite(opt);
  std::cout << rep.table();
  for (const auto& r : rep.rows) {
    EXPECT_TRUE(r.pass) << r.name << " rel " << r.max_rel_error;
    EXPECT_GT(r.probes, 20) << r.name;
  }
}

TEST(GradcheckSuite, InjectedOpFaultIsCaught) {
  SuiteOptions opt;
  opt.scope = "conv2d";
  opt.inject_fault = "conv2d";
  opt.geometries = 3;
  const auto rep = run_gradcheck_suite(opt);
  EXPECT_FALSE(rep.pass);
  EXPECT_FALSE(row(rep, "conv2d", "float32").pass);
  EXPECT_FALSE(row(rep, "conv2d", "float64").pass);
}

TEST(GradcheckSuite, InjectedCompositeFaultIsCaught) {
  SuiteOptions opt;
  opt.scope = "loss_F";
  opt.inject_fault = "loss_F";
  opt.composite_geometries = 1;
  EXPECT_FALSE(run_gradcheck_suite(opt).pass);
}

TEST(GradcheckSuite, FaultElsewhereLeavesScopeClean) {
  SuiteOptions opt;
  opt.scope = "relu";
  opt.inject_fault = "conv2d";
  opt.geometries = 3;
  EXPECT_TRUE(run_gradcheck_suite(opt).pass);
}

TEST(GradcheckSuite, RejectsUnknownNames) {
  SuiteOptions opt;
  opt.scope = "convolution";
  EXPECT_THROW(run_gradcheck_suite(opt), std::invalid_argument);
  opt.scope = "all";
  opt.inject_fault = "nope";
  EXPECT_THROW(run_gradcheck_suite(opt), std::invalid_argument);
}

TEST(GradcheckSuite, ReportJsonCarriesRows) {
  SuiteOptions opt;
  opt.scope = "sum";
  opt.geometries = 2;
  const auto j = run_gradcheck_suite(opt).to_json();
  ASSERT_EQ(j["rows"].size(), 2u);
  EXPECT_EQ(j["rows"][0]["name"], "sum");
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_TRUE(j["fault"].is_null());
}

}  // namespace
}  // namespace stydesty
