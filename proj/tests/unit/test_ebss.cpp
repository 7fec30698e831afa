#include "moeq/ebss.hpp"
#include "moeq/errors.hpp"
#include "moeq/runtime.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

namespace moeq {
namespace {

using test::small_config;
using test::TempDir;

Branch branch_with(std::size_t len, double r_s, double sigma) {
    Branch b;
    b.tokens.assign(len, 1);
    b.r_s = r_s;
    b.cached_sigma = sigma;
    return b;
}

void write_text(const std::filesystem::path &p, const std::string &text) {
    std::ofstream out(p, std::ios::trunc);
    out << text;
}

std::string error_of(const std::filesystem::path &p, std::uint32_t vocab) {
    try {
        read_calibration_file(p, vocab);
    } catch (const FormatError &e) {
        return e.what();
    }
    return "";
}

TEST(ExtendLogprob, AddsTokenLogProbability) {
    EXPECT_EQ(extend_logprob(branch_with(1, 0.0, 0.0), -1.0), -1.0);
    EXPECT_EQ(extend_logprob(branch_with(4, -3.5, 0.0), 0.0), -3.5);
}

TEST(ExtensionPerplexity, HandEvaluated) {
    EXPECT_NEAR(extension_perplexity(branch_with(3, -2.0, 0.0), -1.0), std::exp(0.75), 1e-15);
    EXPECT_NEAR(extension_perplexity(branch_with(3, -2.0, 0.0), -1.0), 2.117, 5e-4);
}

TEST(ScoreCandidate, HandEvaluated) {
    EXPECT_NEAR(score_candidate(branch_with(3, -2.0, 0.5), -1.0, 1.2), 0.75 + 0.5 / 1.2, 1e-15);
    EXPECT_NEAR(score_candidate(branch_with(3, -2.0, 0.5), -1.0, 1.2), 1.16667, 5e-6);
}

TEST(ScoreCandidate, ZeroSigmaIsAverageNll) {
    EXPECT_DOUBLE_EQ(score_candidate(branch_with(5, -4.0, 0.0), -2.0, 1.2), 1.0);
}

TEST(ScoreCandidate, MonotoneInTokenProbability) {
    const Branch b = branch_with(6, -7.0, 0.3);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> lp(-10.0, 0.0);
    for (int i = 0; i < 100; ++i) {
        const double a = lp(rng);
        const double c = lp(rng);
        if (a > c) {
            EXPECT_LT(score_candidate(b, a, 1.2), score_candidate(b, c, 1.2));
        }
    }
}

TEST(ScoreCandidate, RejectsNonPositiveTau) {
    EXPECT_THROW(score_candidate(branch_with(2, 0.0, 0.1), -1.0, 0.0), ConfigError);
}

TEST(PruneTopW, WidthOneKeepsGlobalMinimum) {
    const std::vector<Candidate> c{{0, 5, 0.9, 0}, {1, 2, 0.3, 0}, {0, 7, 0.4, 0}};
    const auto r = prune_topw(c, 1);
    ASSERT_EQ(r.selected.size(), 1u);
    EXPECT_EQ(r.selected[0].token, 2u);
}

TEST(PruneTopW, TiesBreakByTokenThenParent) {
    const std::vector<Candidate> c{{1, 3, 0.5, 0}, {0, 3, 0.5, 0}, {2, 1, 0.5, 0}, {0, 9, 0.5, 0}};
    const auto r = prune_topw(c, 3);
    ASSERT_EQ(r.selected.size(), 3u);
    EXPECT_EQ(r.selected[0].token, 1u);
    EXPECT_EQ(r.selected[1].token, 3u);
    EXPECT_EQ(r.selected[1].parent, 0u);
    EXPECT_EQ(r.selected[2].parent, 1u);
}

TEST(PruneTopW, MatchesSortOracle) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Candidate> c;
        for (std::uint32_t i = 0; i < 40; ++i) {
            c.push_back({i % 4, i, std::round(u(rng) * 20) / 20, 0});
        }
        auto oracle = c;
        std::sort(oracle.begin(), oracle.end(), [](const Candidate &a, const Candidate &b) {
            return std::tie(a.score, a.token, a.parent) < std::tie(b.score, b.token, b.parent);
        });
        const auto r = prune_topw(c, 4);
        ASSERT_EQ(r.selected.size(), 4u);
        for (int i = 0; i < 4; ++i) {
            EXPECT_EQ(r.selected[i].token, oracle[i].token);
            EXPECT_EQ(r.selected[i].parent, oracle[i].parent);
        }
        EXPECT_FALSE(r.underfilled);
    }
}

TEST(PruneTopW, ReportsUnderfill) {
    const std::vector<Candidate> c{{0, 1, 0.1, 0}};
    EXPECT_TRUE(prune_topw(c, 2).underfilled);
}

TEST(EbssSearch, WidthOneWithoutBalanceIsGreedyDecoding) {
    const ModelWeights m = forge_model(small_config(), 3, 2.0);
    const std::vector<std::uint32_t> start{5};
    const auto b = ebss_search(m, start, 10, 1e300);
    ASSERT_EQ(b.size(), 1u);
    std::vector<std::uint32_t> greedy{5};
    while (greedy.size() < 10) {
        const auto lp = model_forward(m, greedy).log_probs.back();
        greedy.push_back(static_cast<std::uint32_t>(std::max_element(lp.begin(), lp.end()) - lp.begin()));
    }
    EXPECT_EQ(b[0].tokens, greedy);
}

TEST(EbssSearch, ForwardPassesAreWidthTimesLength) {
    const ModelWeights m = forge_model(small_config(), 4, 1.0);
    for (std::uint32_t w : {1u, 2u, 4u}) {
        for (std::uint32_t len : {2u, 8u}) {
            std::vector<std::uint32_t> starts(w);
            for (std::uint32_t i = 0; i < w; ++i) {
                starts[i] = i + 1;
            }
            std::uint64_t passes = 0;
            const auto b = ebss_search(m, starts, len, 1.2, &passes);
            EXPECT_EQ(passes, std::uint64_t{w} * len);
            for (const auto &branch : b) {
                EXPECT_EQ(branch.tokens.size(), len);
                EXPECT_EQ(branch.routed_tokens(m.config.top_k), len);
            }
        }
    }
}

TEST(EbssSearch, CountersMatchRoutingOfFinalSequence) {
    const ModelWeights m = forge_model(small_config(), 5, 3.0);
    const std::vector<std::uint32_t> starts{1, 2};
    for (const auto &b : ebss_search(m, starts, 8, 1.2)) {
        std::vector<RoutingTrace> traces{model_forward(m, b.tokens).routing};
        EXPECT_EQ(b.usage_counters, routing_counts(traces));
        EXPECT_NEAR(b.cached_sigma, expert_usage(traces).sigma, 1e-12);
    }
}

TEST(SampleStartTokens, DistinctAndDeterministic) {
    const ModelWeights m = forge_model(small_config(), 6, 1.0);
    const std::uint32_t bos = kBosToken;
    const auto lp = model_forward(m, std::span(&bos, 1)).log_probs[0];
    const auto a = sample_start_tokens(lp, 8, 11, 0);
    EXPECT_EQ(a, sample_start_tokens(lp, 8, 11, 0));
    EXPECT_NE(a, sample_start_tokens(lp, 8, 11, 1));
    EXPECT_EQ(std::set<std::uint32_t>(a.begin(), a.end()).size(), 8u);
    EXPECT_THROW(sample_start_tokens(lp, 33, 11, 0), ConfigError);
}

TEST(EbssGenerate, EmitsRequestedSequenceCount) {
    const ModelWeights m = forge_model(small_config(), 7, 2.0);
    EbssStats stats;
    const auto set = ebss_generate(m, EbssConfig{.w = 4, .target_len = 6, .n_sequences = 8, .tau = 1.2, .seed = 3},
                                   &stats);
    ASSERT_EQ(set.sequences.size(), 8u);
    for (const auto &s : set.sequences) {
        EXPECT_EQ(s.size(), 6u);
    }
    EXPECT_EQ(stats.prior_passes, 1u);
    EXPECT_EQ(stats.passes_per_search, (std::vector<std::uint64_t>{24, 24}));
    EXPECT_EQ(stats.total_passes(), 49u);
}

TEST(EbssGenerate, PartialLastSearchIsTrimmed) {
    const ModelWeights m = forge_model(small_config(), 7, 2.0);
    const auto set = ebss_generate(m, EbssConfig{.w = 4, .target_len = 4, .n_sequences = 6, .tau = 1.2, .seed = 3});
    EXPECT_EQ(set.sequences.size(), 6u);
}

TEST(EbssGenerate, DeterministicForSeed) {
    const ModelWeights m = forge_model(small_config(), 8, 2.0);
    const EbssConfig c{.w = 2, .target_len = 6, .n_sequences = 4, .tau = 1.2, .seed = 9};
    EXPECT_EQ(ebss_generate(m, c).sequences, ebss_generate(m, c).sequences);
}

TEST(EbssGenerate, SummaryMatchesRecomputation) {
    const ModelWeights m = forge_model(small_config(), 9, 2.0);
    const auto set = ebss_generate(m, EbssConfig{.w = 2, .target_len = 8, .n_sequences = 4, .tau = 1.2, .seed = 1});
    const auto again = summarize_calibration(m, set.sequences);
    EXPECT_NEAR(set.summary->sigma, again.sigma, 1e-12);
    EXPECT_NEAR(set.summary->mean_ppl, again.mean_ppl, 1e-9 * again.mean_ppl);
}

TEST(EbssConfig, ValidatesFields) {
    EXPECT_THROW((EbssConfig{.w = 0}).validate(), ConfigError);
    EXPECT_THROW((EbssConfig{.tau = 0.0}).validate(), ConfigError);
    EXPECT_THROW((EbssConfig{.target_len = 1}).validate(), ConfigError);
    EXPECT_THROW((EbssConfig{.n_sequences = 0}).validate(), ConfigError);
}

TEST(CalibrationFile, RoundTripKeepsSequencesAndHeader) {
    TempDir dir("calib");
    const ModelWeights m = forge_model(small_config(), 10, 1.0);
    const auto set = ebss_generate(m, EbssConfig{.w = 2, .target_len = 5, .n_sequences = 3, .tau = 1.2, .seed = 4});
    write_calibration_file(set, dir / "c.txt");
    const auto back = read_calibration_file(dir / "c.txt", 32);
    EXPECT_EQ(back.sequences, set.sequences);
    ASSERT_TRUE(back.ebss.has_value());
    EXPECT_EQ(back.ebss->w, 2u);
    EXPECT_EQ(back.ebss->tau, 1.2);
    EXPECT_EQ(back.ebss->seed, 4u);
}

TEST(CalibrationFile, HeaderIsOptional) {
    TempDir dir("calib_plain");
    write_text(dir / "c.txt", "1 2 3\n4 5\n");
    const auto set = read_calibration_file(dir / "c.txt", 32);
    EXPECT_EQ(set.sequences, (std::vector<std::vector<std::uint32_t>>{{1, 2, 3}, {4, 5}}));
    EXPECT_FALSE(set.ebss.has_value());
}

TEST(CalibrationFile, ErrorsNameTheLine) {
    TempDir dir("calib_bad");
    write_text(dir / "a.txt", "#external v1\n1 2 3\n4 x5 6\n");
    EXPECT_NE(error_of(dir / "a.txt", 32).find("line 3"), std::string::npos);
    write_text(dir / "b.txt", "1 2\n3 40\n");
    const auto oov = error_of(dir / "b.txt", 32);
    EXPECT_NE(oov.find("line 2"), std::string::npos);
    EXPECT_NE(oov.find("40"), std::string::npos);
    write_text(dir / "c.txt", "1 2\n\n3\n");
    EXPECT_NE(error_of(dir / "c.txt", 32).find("line 2"), std::string::npos);
    write_text(dir / "d.txt", "1 -2\n");
    EXPECT_NE(error_of(dir / "d.txt", 32).find("line 1"), std::string::npos);
}

} // namespace
} // namespace moeq
