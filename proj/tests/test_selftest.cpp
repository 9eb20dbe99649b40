#include <gtest/gtest.h>

#include "crosspoint/selftest.hpp"

using namespace crosspoint;

TEST(SelfTest, EveryCheckPasses) {
  for (const auto& r : selftest::run_all(3)) {
    EXPECT_TRUE(r.passed) << selftest::format_row(r);
    EXPECT_FALSE(r.detail.empty());
  }
}

TEST(SelfTest, RowFormat) {
  const selftest::CheckResult r{"scale invariance", false, "detail", 1.5};
  const auto row = selftest::format_row(r);
  EXPECT_TRUE(row.starts_with("scale invariance"));
  EXPECT_NE(row.find("FAIL"), std::string::npos);
  EXPECT_TRUE(row.ends_with("detail"));
}

TEST(SelfTest, GradientCheckDetectsABrokenTolerance) {
  // Forcing an impossible tolerance must fail rather than pass silently.
  EXPECT_FALSE(selftest::gradient_check(0, 1e-5, 0.0).passed);
}
