#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "flowcps/analysis.hpp"
#include "flowcps/rng.hpp"
#include "flowcps/samplers.hpp"

using namespace flowcps;

namespace {

bool bitwise_equal(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    return true;
}

const VelocityField kDeltaAtZero = DeltaOracle{{0.0, 0.0}};

}  // namespace

TEST(EndpointsTest, KnownValues) {
    auto [x0, x1] = predict_endpoints({0.5}, 0.5, {1.0});
    EXPECT_DOUBLE_EQ(x0[0], 0.0);
    EXPECT_DOUBLE_EQ(x1[0], 1.0);
}

TEST(EndpointsTest, ZeroTimeIgnoresVelocityForSample) {
    auto [x0, x1] = predict_endpoints({0.37}, 0.0, {123.0});
    EXPECT_EQ(x0[0], 0.37);
    EXPECT_DOUBLE_EQ(x1[0], 0.37 + 123.0);
}

TEST(EndpointsTest, ReconstructionIsExact) {
    Rng rng(41);
    for (int rep = 0; rep < 300; ++rep) {
        const Vec x = rng.normal_vec(3);
        const Vec v = rng.normal_vec(3);
        const double t = rng.uniform();
        auto [x0, x1] = predict_endpoints(x, t, v);
        for (std::size_t i = 0; i < 3; ++i)
            EXPECT_NEAR((1.0 - t) * x0[i] + t * x1[i], x[i], 1e-15 * std::max(1.0, std::abs(x[i])));
    }
}

TEST(OdeStepTest, FullStepLandsOnTheOraclePoint) {
    const Vec c = {0.8, -0.3};
    const VelocityField f = DeltaOracle{c};
    Rng rng(43);
    const Vec x = rng.normal_vec(2);
    auto [next, report] = ode_step(f, x, 0.7, 0.7);  // dt == t: single full step
    EXPECT_NEAR(next[0], c[0], 1e-12);
    EXPECT_NEAR(next[1], c[1], 1e-12);
    EXPECT_EQ(report.coeff_fresh_noise, 0.0);
}

TEST(OdeStepTest, ExactOracleFollowsTheStraightLine) {
    Rng rng(47);
    Vec x = rng.normal_vec(2);
    const TimeGrid grid = uniform_grid(4);
    for (int k = 0; k < 4; ++k) {
        const double t = grid.steps[static_cast<std::size_t>(k)];
        const double dt = t - grid.steps[static_cast<std::size_t>(k) + 1];
        x = ode_step(kDeltaAtZero, x, t, dt).first;
    }
    EXPECT_LT(norm(x), 1e-12);
}

TEST(OdeStepTest, ZeroVelocityLeavesStateUnchanged) {
    MlpArchitecture arch;
    arch.dim = 2;
    arch.hidden = {4};
    const VelocityField f = Mlp(arch);  // all-zero parameters -> v = 0
    const Vec x = {0.4, -2.5};
    auto [next, report] = ode_step(f, x, 0.6, 0.2);
    EXPECT_DOUBLE_EQ(next[0], x[0]);
    EXPECT_DOUBLE_EQ(next[1], x[1]);
}

TEST(FlowSdeStepTest, ZeroEtaIsBitwiseOde) {
    Rng rng(53);
    for (int rep = 0; rep < 50; ++rep) {
        const Vec x = rng.normal_vec(2);
        const Vec eps = rng.normal_vec(2);
        const double t = 0.05 + 0.9 * rng.uniform();
        const double dt = t * (0.1 + 0.8 * rng.uniform());
        const auto ode = ode_step(kDeltaAtZero, x, t, dt);
        const auto sde = flow_sde_step(kDeltaAtZero, x, t, dt, SigmaRule(SigmaKind::DanceGrpo, 0.0), eps);
        EXPECT_TRUE(bitwise_equal(ode.first, sde.first));
    }
}

TEST(FlowSdeStepTest, DanceCoefficientsAtKnownPoint) {
    // t=0.5, dt=0.1, eta=0.3: pred coeff 0.4 - 0.09*0.1/(2*0.5) = 0.391,
    // fresh coeff 0.3 sqrt(0.1); cross-checked with 40-digit arithmetic
    Rng rng(59);
    const auto [next, report] =
        flow_sde_step(kDeltaAtZero, rng.normal_vec(2), 0.5, 0.1, SigmaRule(SigmaKind::DanceGrpo, 0.3), rng.normal_vec(2));
    EXPECT_NEAR(report.coeff_sample, 0.6, 1e-15);
    EXPECT_NEAR(report.coeff_pred_noise, 0.391, 1e-15);
    EXPECT_NEAR(report.coeff_fresh_noise, 0.09486832980505138, 1e-15);
}

TEST(FlowSdeStepTest, PredNoiseCoefficientGoesNegativeWithoutClamping) {
    // the pathology near t=0: at t=dt=0.25, eta=1 the coefficient is -0.5
    Rng rng(61);
    const auto [next, report] =
        flow_sde_step(kDeltaAtZero, rng.normal_vec(2), 0.25, 0.25, SigmaRule(SigmaKind::DanceGrpo, 1.0), rng.normal_vec(2));
    EXPECT_NEAR(report.coeff_pred_noise, -0.5, 1e-15);
}

TEST(CpsStepTest, ZeroEtaIsBitwiseOde) {
    Rng rng(67);
    for (int rep = 0; rep < 50; ++rep) {
        const Vec x = rng.normal_vec(2);
        const Vec eps = rng.normal_vec(2);
        const double t = 0.05 + 0.9 * rng.uniform();
        const double dt = t * (0.1 + 0.8 * rng.uniform());
        const auto ode = ode_step(kDeltaAtZero, x, t, dt);
        const auto cps = cps_step(kDeltaAtZero, x, t, dt, 0.0, eps);
        EXPECT_TRUE(bitwise_equal(ode.first, cps.first));
    }
}

TEST(CpsStepTest, FullStrengthResamplesThePredictedNoise) {
    Rng rng(71);
    const Vec x = rng.normal_vec(2);
    const Vec eps = rng.normal_vec(2);
    const double t = 0.5;
    const double dt = 0.1;
    const auto [next, report] = cps_step(kDeltaAtZero, x, t, dt, 1.0, eps);
    const Vec v = eval_velocity(kDeltaAtZero, x, t);
    auto [x0_hat, x1_hat] = predict_endpoints(x, t, v);
    for (std::size_t i = 0; i < 2; ++i)
        EXPECT_NEAR(next[i], (1.0 - 0.4) * x0_hat[i] + 0.4 * eps[i], 1e-14);
}

TEST(CpsStepTest, FinalStepIsThePredictedSampleRegardlessOfNoise) {
    Rng rng(73);
    const Vec x = rng.normal_vec(2);
    const double t = 0.25;
    const auto a = cps_step(kDeltaAtZero, x, t, t, 0.3, rng.normal_vec(2));
    const auto b = cps_step(kDeltaAtZero, x, t, t, 0.9, rng.normal_vec(2));
    const Vec v = eval_velocity(kDeltaAtZero, x, t);
    auto [x0_hat, x1_hat] = predict_endpoints(x, t, v);
    EXPECT_TRUE(bitwise_equal(a.first, x0_hat));
    EXPECT_TRUE(bitwise_equal(b.first, x0_hat));
}

TEST(CpsSigmaStepTest, ZeroSigmaIsBitwiseOde) {
    Rng rng(79);
    const Vec x = rng.normal_vec(2);
    const Vec eps = rng.normal_vec(2);
    const auto ode = ode_step(kDeltaAtZero, x, 0.5, 0.1);
    const auto cps = cps_sigma_step(kDeltaAtZero, x, 0.5, 0.1, 0.0, eps);
    EXPECT_TRUE(bitwise_equal(ode.first, cps.first));
}

TEST(CpsSigmaStepTest, MaximalSigmaZerosThePredNoiseCoefficient) {
    Rng rng(83);
    const auto [next, report] = cps_sigma_step(kDeltaAtZero, rng.normal_vec(2), 0.5, 0.1, 0.4, rng.normal_vec(2));
    EXPECT_EQ(report.coeff_pred_noise, 0.0);
    EXPECT_EQ(report.coeff_fresh_noise, 0.4);
}

TEST(CpsSigmaStepTest, KnownCoefficients) {
    // sqrt(0.4^2 - 0.2^2) = sqrt(0.12); total noise sqrt(0.12 + 0.04) = 0.4
    Rng rng(89);
    const auto [next, report] = cps_sigma_step(kDeltaAtZero, rng.normal_vec(2), 0.5, 0.1, 0.2, rng.normal_vec(2));
    EXPECT_NEAR(report.coeff_pred_noise, 0.34641016151377546, 1e-15);
    EXPECT_NEAR(total_noise_level(report.coeff_pred_noise, report.coeff_fresh_noise), 0.4, 1e-15);
}

TEST(CpsSigmaStepTest, OversizedSigmaRejected) {
    Rng rng(97);
    EXPECT_THROW(cps_sigma_step(kDeltaAtZero, rng.normal_vec(2), 0.5, 0.1, 0.41, rng.normal_vec(2)),
                 std::domain_error);
}

TEST(CpsSigmaStepTest, AgreesWithEtaParameterization) {
    Rng rng(101);
    for (int rep = 0; rep < 50; ++rep) {
        const Vec x = rng.normal_vec(2);
        const Vec eps = rng.normal_vec(2);
        const double t = 0.1 + 0.85 * rng.uniform();
        const double dt = t * (0.1 + 0.5 * rng.uniform());
        const double eta = rng.uniform();
        const double sigma = (t - dt) * std::sin(eta * 3.14159265358979323846 / 2.0);
        const auto by_eta = cps_step(kDeltaAtZero, x, t, dt, eta, eps);
        const auto by_sigma = cps_sigma_step(kDeltaAtZero, x, t, dt, sigma, eps);
        for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(by_eta.first[i], by_sigma.first[i], 1e-13);
    }
}

TEST(CpwsStepTest, ZeroEtaIsBitwiseOde) {
    Rng rng(103);
    const Vec x = rng.normal_vec(2);
    const Vec eps = rng.normal_vec(2);
    const auto ode = ode_step(kDeltaAtZero, x, 0.5, 0.1);
    const auto cpws = cpws_step(kDeltaAtZero, x, 0.5, 0.1, SigmaRule(SigmaKind::DanceGrpo, 0.0), eps);
    EXPECT_TRUE(bitwise_equal(ode.first, cpws.first));
}

TEST(CpwsStepTest, KnownCoefficientsPreserveTheTotal) {
    // pred coeff sqrt(0.16 - 0.009), fresh 0.3 sqrt(0.1); total is 0.4
    Rng rng(107);
    const auto [next, report] =
        cpws_step(kDeltaAtZero, rng.normal_vec(2), 0.5, 0.1, SigmaRule(SigmaKind::DanceGrpo, 0.3), rng.normal_vec(2));
    EXPECT_NEAR(report.coeff_pred_noise, 0.38858718455450895, 1e-15);
    EXPECT_NEAR(report.coeff_fresh_noise, 0.09486832980505138, 1e-15);
    EXPECT_LE(ulp_distance(total_noise_level(report.coeff_pred_noise, report.coeff_fresh_noise), 0.4), 2u);
}

TEST(CpwsStepTest, RadicandViolationIsAHardErrorNamingTheStep) {
    Rng rng(109);
    try {
        cpws_step(kDeltaAtZero, rng.normal_vec(2), 0.25, 0.25, SigmaRule(SigmaKind::DanceGrpo, 1.0), rng.normal_vec(2));
        FAIL() << "expected a radicand error";
    } catch (const std::domain_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("radicand"), std::string::npos);
        EXPECT_NE(msg.find("t=0.25"), std::string::npos);
    }
}

TEST(CpwsStepTest, GapToFlowSdeShrinksWithStepSizeAndRespectsTheBudget) {
    for (const double t : {0.9, 0.5, 0.3}) {
        for (const double sigma : {0.1, 0.3, 0.6}) {
            const SigmaRule rule(SigmaKind::DanceGrpo, sigma);
            double previous_gap = 1e9;
            for (const double dt : {0.1, 0.05, 0.025, 0.0125}) {
                if (sigma * sigma * dt > (t - dt) * (t - dt)) continue;
                const auto cpws = step_coefficients(SamplerKind::cpws(rule), t, dt);
                const auto sde = step_coefficients(SamplerKind::flow_sde(rule), t, dt);
                const double gap = std::abs(cpws.pred_noise - sde.pred_noise);
                EXPECT_LT(gap, previous_gap) << "t=" << t << " sigma=" << sigma << " dt=" << dt;
                EXPECT_LE(gap, theorem1_error(t, dt, sigma).predicted_error) << "t=" << t << " sigma=" << sigma;
                previous_gap = gap;
            }
        }
    }
}

TEST(PatchedStepTest, ZeroEtaIsBitwiseOde) {
    Rng rng(113);
    const Vec x = rng.normal_vec(2);
    const Vec eps = rng.normal_vec(2);
    const auto ode = ode_step(kDeltaAtZero, x, 0.5, 0.1);
    const auto patched = patched_sde_step(kDeltaAtZero, x, 0.5, 0.1, 0.0, eps);
    EXPECT_TRUE(bitwise_equal(ode.first, patched.first));
}

TEST(PatchedStepTest, KnownCoefficients) {
    // pred: 0.4 (1 - 0.245 * 0.1) = 0.3902; fresh: 0.7 * 0.4 * sqrt(0.1)
    Rng rng(127);
    const auto [next, report] = patched_sde_step(kDeltaAtZero, rng.normal_vec(2), 0.5, 0.1, 0.7, rng.normal_vec(2));
    EXPECT_NEAR(report.coeff_pred_noise, 0.3902, 1e-15);
    EXPECT_NEAR(report.coeff_fresh_noise, 0.08854377448471462, 1e-15);
}

TEST(PatchedStepTest, CoefficientsStayNonNegativeNearZero) {
    // every noise term carries the factor t - dt, so nothing blows up at t=0
    Rng rng(131);
    for (int rep = 0; rep < 200; ++rep) {
        const double t = 0.02 + 0.9 * rng.uniform();
        const double dt = t * (0.1 + 0.9 * rng.uniform());
        const double eta = std::sqrt(2.0 / dt) * rng.uniform();
        const auto c = step_coefficients(SamplerKind::patched_sde(eta), t, dt);
        EXPECT_GE(c.pred_noise, 0.0);
        EXPECT_GE(c.fresh_noise, 0.0);
    }
}

TEST(DdimRefStepTest, DeterministicLimitKeepsFullNoiseLevel) {
    Rng rng(137);
    const Vec eps_pred = rng.normal_vec(2);
    const auto [next, report] = ddim_ref_step(eps_pred, rng.normal_vec(2), 0.8, 0.9, 0.0, zeros(2));
    EXPECT_EQ(report.coeff_fresh_noise, 0.0);
    EXPECT_NEAR(total_noise_level(report.coeff_pred_noise, report.coeff_fresh_noise), std::sqrt(1.0 - 0.9), 1e-15);
}

TEST(DdimRefStepTest, KnownSplitAtSigmaTenth) {
    Rng rng(139);
    const auto [next, report] = ddim_ref_step(rng.normal_vec(2), rng.normal_vec(2), 0.8, 0.9, 0.1, rng.normal_vec(2));
    EXPECT_NEAR(report.coeff_pred_noise, 0.3, 1e-15);
    EXPECT_NEAR(total_noise_level(report.coeff_pred_noise, report.coeff_fresh_noise), 0.31622776601683794, 1e-15);
}

TEST(DdimRefStepTest, SquaredCoefficientsSumToOne) {
    Rng rng(149);
    for (int rep = 0; rep < 200; ++rep) {
        const double alpha_t = 0.05 + 0.9 * rng.uniform();
        const double alpha_prev = 0.05 + 0.9 * rng.uniform();
        const double sigma = std::sqrt(1.0 - alpha_prev) * rng.uniform();
        const auto [next, report] = ddim_ref_step(rng.normal_vec(1), rng.normal_vec(1), alpha_t, alpha_prev, sigma, rng.normal_vec(1));
        const double total = total_noise_level(report.coeff_pred_noise, report.coeff_fresh_noise);
        EXPECT_NEAR(report.coeff_sample * report.coeff_sample + total * total, 1.0, 1e-12);
    }
}

TEST(DdimRefStepTest, OversizedSigmaRejected) {
    Rng rng(151);
    EXPECT_THROW(ddim_ref_step(rng.normal_vec(1), rng.normal_vec(1), 0.8, 0.9, 0.5, rng.normal_vec(1)),
                 std::domain_error);
}

TEST(StepProperty, SampleCoefficientIsAlwaysTheSchedulersShare) {
    Rng rng(157);
    const SamplerKind kinds[] = {
        SamplerKind::ode(),
        SamplerKind::flow_sde(SigmaRule(SigmaKind::DanceGrpo, 0.4)),
        SamplerKind::flow_sde(SigmaRule(SigmaKind::FlowGrpo, 0.4)),
        SamplerKind::cps(0.8),
        SamplerKind::cpws(SigmaRule(SigmaKind::CpsEta, 0.8)),
        SamplerKind::patched_sde(0.5),
    };
    for (int rep = 0; rep < 300; ++rep) {
        const double t = 0.05 + 0.9 * rng.uniform();
        const double dt = t * (0.05 + 0.9 * rng.uniform());
        const auto& kind = kinds[rep % 6];
        const auto c = step_coefficients(kind, t, dt);
        EXPECT_EQ(c.sample, 1.0 - (t - dt));
    }
}

TEST(StepProperty, CpsFamiliesPreserveTheNoiseBudget) {
    Rng rng(163);
    for (int rep = 0; rep < 1000; ++rep) {
        const double t = 0.05 + 0.9 * rng.uniform();
        const double dt = t * (0.05 + 0.9 * rng.uniform());
        const double eta = rng.uniform();
        const auto c = step_coefficients(SamplerKind::cps(eta), t, dt);
        EXPECT_LE(ulp_distance(total_noise_level(c.pred_noise, c.fresh_noise), t - dt), 4u);
    }
}

TEST(StepProperty, FlowSdeStrictlyExceedsTheBudget) {
    Rng rng(167);
    for (int rep = 0; rep < 1000; ++rep) {
        const double t = 0.05 + 0.9 * rng.uniform();
        const double dt = t * (0.05 + 0.9 * rng.uniform());
        const double eta = 0.05 + rng.uniform();
        const SigmaKind rule_kind = rep % 2 == 0 ? SigmaKind::DanceGrpo : SigmaKind::FlowGrpo;
        const auto c = step_coefficients(SamplerKind::flow_sde(SigmaRule(rule_kind, eta)), t, dt);
        if (c.pred_noise < 0.0) continue;  // sign flip; the excess claim is scoped to the sane region
        EXPECT_GT(total_noise_level(c.pred_noise, c.fresh_noise), t - dt);
    }
}

TEST(StepProperty, OutputStdOverDrawsMatchesTotalNoiseLevel) {
    // Feed x = t * z so the predicted noise x / t is a standard normal, then
    // measure the per-coordinate std of the step output over fresh draws.
    Rng rng(173);
    const double t = 0.5;
    const double dt = 0.1;
    const int n = 100000;
    const auto c = step_coefficients(SamplerKind::cps(0.3), t, dt);
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        Vec z = rng.normal_vec(1);
        const Vec x = {t * z[0]};
        const auto [next, report] = cps_step(kDeltaAtZero, x, t, dt, 0.3, rng.normal_vec(1));
        sum += next[0];
        sum_sq += next[0] * next[0];
    }
    const double mean = sum / n;
    const double stddev = std::sqrt(sum_sq / n - mean * mean);
    const double expected = total_noise_level(c.pred_noise, c.fresh_noise);
    const double se = expected / std::sqrt(2.0 * (n - 1));
    EXPECT_NEAR(stddev, expected, 3.0 * se);
}

TEST(RolloutTest, OdeWithExactOracleLandsOnThePoint) {
    const Trajectory traj = rollout(SamplerKind::ode(), kDeltaAtZero, uniform_grid(8), 2024);
    EXPECT_LT(norm(traj.terminal()), 1e-12);
    EXPECT_EQ(traj.states.size(), traj.reports.size() + 1);
    EXPECT_EQ(traj.states.front().first, 1.0);
    EXPECT_TRUE(traj.logprob_terms.empty());
}

TEST(RolloutTest, DeterministicGivenSeed) {
    const auto kind = SamplerKind::cps(0.7);
    const Trajectory a = rollout(kind, kDeltaAtZero, uniform_grid(8), 99);
    const Trajectory b = rollout(kind, kDeltaAtZero, uniform_grid(8), 99);
    ASSERT_EQ(a.states.size(), b.states.size());
    for (std::size_t k = 0; k < a.states.size(); ++k) EXPECT_TRUE(bitwise_equal(a.states[k].second, b.states[k].second));
    EXPECT_EQ(a.logprob_terms, b.logprob_terms);
}

TEST(RolloutTest, TerminalIgnoresTheLastDraw) {
    // final step coefficients vanish for the preserving sampler
    const Trajectory traj = rollout(SamplerKind::cps(0.9), kDeltaAtZero, uniform_grid(8), 7);
    const auto& last = traj.reports.back();
    EXPECT_EQ(last.coeff_pred_noise, 0.0);
    EXPECT_EQ(last.coeff_fresh_noise, 0.0);
    EXPECT_TRUE(bitwise_equal(traj.terminal(), last.mu));
}

TEST(RolloutTest, LogprobTermsMatchTheInjectedNoise) {
    const Trajectory traj = rollout(SamplerKind::flow_sde(SigmaRule(SigmaKind::DanceGrpo, 0.5)), kDeltaAtZero,
                                    uniform_grid(6), 12);
    ASSERT_EQ(traj.logprob_terms.size(), traj.reports.size());
    for (std::size_t k = 0; k < traj.reports.size(); ++k) {
        const auto& r = traj.reports[k];
        const double expected = -r.coeff_fresh_noise * r.coeff_fresh_noise * squared_norm(r.eps);
        EXPECT_NEAR(traj.logprob_terms[k], expected, 1e-12 * std::max(1.0, std::abs(expected)));
    }
}

TEST(RolloutTest, CpwsRadicandViolationSurfacesBeforeSampling) {
    try {
        rollout(SamplerKind::cpws(SigmaRule(SigmaKind::DanceGrpo, 0.5)), kDeltaAtZero, uniform_grid(8), 5);
        FAIL() << "expected a radicand error";
    } catch (const std::domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(RolloutTest, DdimRefHasNoFlowRollout) {
    EXPECT_THROW(rollout(SamplerKind::ddim_ref(SigmaRule(SigmaKind::DanceGrpo, 0.1)), kDeltaAtZero, uniform_grid(4), 1),
                 std::invalid_argument);
}

TEST(TrajectoryCsvTest, OneRecordPerStep) {
    const Trajectory traj = rollout(SamplerKind::cps(0.5), kDeltaAtZero, uniform_grid(4), 3);
    std::ostringstream out;
    write_trajectory_csv(out, traj);
    const std::string text = out.str();
    std::size_t lines = 0;
    for (char ch : text)
        if (ch == '\n') ++lines;
    EXPECT_EQ(lines, 5u);  // header + one row per step
    EXPECT_EQ(text.rfind("t,dt,coeff_sample,coeff_pred_noise,coeff_fresh_noise,x_norm,logprob_term\n", 0), 0u);
}

TEST(TrajectoryCsvTest, StateDumpRoundTripsThroughTheArrayFormat) {
    const Trajectory traj = rollout(SamplerKind::cps(0.5), kDeltaAtZero, uniform_grid(4), 3);
    std::ostringstream out(std::ios::binary);
    write_states_f64(out, traj);
    std::istringstream in(out.str(), std::ios::binary);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "flowcps-states rows=5 dim=2");
    for (const auto& [t, x] : traj.states) {
        const auto row = flowcps::detail::read_le_doubles(in, 3);
        EXPECT_EQ(row[0], t);
        EXPECT_EQ(row[1], x[0]);
        EXPECT_EQ(row[2], x[1]);
    }
}
