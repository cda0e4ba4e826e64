// Central-difference validation of every registered loss component across
// multiple seeds, plus the component name aliases the CLI accepts.

#include <gtest/gtest.h>

#include <algorithm>

#include "structkd/structkd.hpp"

namespace {

using namespace structkd;

class Setup : public ::testing::Environment {
 public:
  void SetUp() override { ops::set_blas_threads(1); }
};
const auto* const setup_registered =
    ::testing::AddGlobalTestEnvironment(new Setup());

void check_component(const std::string& name, int seeds = 10) {
  for (int s = 1; s <= seeds; ++s) {
    const train::GradcheckReport rep =
        train::run_gradcheck(name, static_cast<std::uint64_t>(s));
    EXPECT_LT(rep.max_rel_err, 1e-3)
        << name << " at seed " << s << " over " << rep.coords
        << " coordinates";
    EXPECT_TRUE(rep.pass);
  }
}

TEST(Gradcheck, PixelWise) { check_component("pixel_wise"); }

TEST(Gradcheck, PairWiseFullGraph) { check_component("pair_wise_full"); }

TEST(Gradcheck, PairWiseLocalGraph) { check_component("pair_wise_local"); }

TEST(Gradcheck, HolisticStudentTerm) { check_component("holistic_s"); }

TEST(Gradcheck, HolisticDiscriminatorLossWithPenalty) {
  check_component("holistic_d");
}

TEST(Gradcheck, Mimic) { check_component("mimic"); }

TEST(Gradcheck, AttentionTransfer) { check_component("attention_transfer"); }

TEST(Gradcheck, ComponentListCoversEveryLoss) {
  const auto& names = train::gradcheck_components();
  EXPECT_EQ(names.size(), 7u);
  for (const char* want :
       {"pixel_wise", "pair_wise_full", "pair_wise_local", "holistic_s",
        "holistic_d", "mimic", "attention_transfer"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end())
        << want;
}

TEST(Gradcheck, AliasesResolve) {
  const train::GradcheckReport a = train::run_gradcheck("pair_wise", 1);
  EXPECT_EQ(a.component, "pair_wise_full");
  EXPECT_TRUE(a.pass);
  const train::GradcheckReport b = train::run_gradcheck("holistic_gp", 1);
  EXPECT_EQ(b.component, "holistic_d");
  EXPECT_TRUE(b.pass);
}

TEST(Gradcheck, UnknownComponentIsAConfigError) {
  try {
    train::run_gradcheck("no_such_loss", 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
}

}  // namespace
