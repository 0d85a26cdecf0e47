#include <gtest/gtest.h>

#include <sstream>

#include "s4m/verify.hpp"

namespace {

using namespace s4m;

TEST(Verify, KernelsPassOnACorrectBuild)
{
    const auto r = verify::run("kernels");
    EXPECT_TRUE(r.passed());
    ASSERT_NE(r.find("kernel_fast_vs_naive_rel_l2"), nullptr);
    EXPECT_GE(r.find("kernel_fast_vs_naive_rel_l2")->samples, 20u);
}

TEST(Verify, AllAggregatesEverySuite)
{
    const auto r = verify::run("all");
    EXPECT_TRUE(r.passed());
    for (const auto& suite : verify::suite_names()) {
        EXPECT_TRUE(std::any_of(r.properties.begin(), r.properties.end(),
                                [&](const verify::Property& p) { return p.suite == suite; }))
            << suite;
    }
    std::ostringstream os;
    verify::write_report(os, r);
    EXPECT_NE(os.str().find("suite,property,samples,max_error,tolerance,status"), std::string::npos);
    EXPECT_NE(os.str().find("all properties passed"), std::string::npos);
}

TEST(Verify, FlippedBBarFailsDualityAndNamesTheProperty)
{
    verify::Options fault;
    fault.flip_b_bar = true;
    const auto r = verify::run("duality", fault);
    EXPECT_FALSE(r.passed());
    const auto* p = r.find("recurrence_vs_fft_convolution_max_abs");
    ASSERT_NE(p, nullptr);
    EXPECT_FALSE(p->passed());
    std::ostringstream os;
    verify::write_report(os, r);
    EXPECT_NE(os.str().find("recurrence_vs_fft_convolution_max_abs"), std::string::npos);
    EXPECT_NE(os.str().find("FAIL"), std::string::npos);
    // The fault does not touch the kernel suite.
    EXPECT_TRUE(verify::run("kernels", fault).passed());
}

TEST(Verify, UnknownSuiteIsAUsageError)
{
    EXPECT_THROW(verify::run("everything"), s4m::invalid_argument);
}

TEST(Verify, NanNeverPasses)
{
    verify::Property p{"s", "p", 1, std::numeric_limits<double>::quiet_NaN(), 1.0};
    EXPECT_FALSE(p.passed());
}

} // namespace
