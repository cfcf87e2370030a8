#include <doctest.h>

#include <xalign/assignment.hpp>
#include <xalign/common.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <vector>

using namespace xalign;
using assign::CostMatrix;
using assign::MatchResult;

namespace {

// Brute-force oracle: minimum over all injective gt -> pred assignments,
// returning the lexicographically smallest optimal pair list (by gt order).
struct BruteResult {
    double cost = 0.0;
    std::vector<int> pred_of_gt;
};

void brute_rec(const CostMatrix& c, int gt, std::vector<char>& used, std::vector<int>& cur,
               double acc, BruteResult& best, bool& found) {
    if (gt == c.n_gt) {
        if (!found || acc < best.cost - 1e-12 ||
            (std::fabs(acc - best.cost) <= 1e-12 &&
             std::lexicographical_compare(cur.begin(), cur.end(), best.pred_of_gt.begin(),
                                          best.pred_of_gt.end()))) {
            best.cost = acc;
            best.pred_of_gt = cur;
            found = true;
        }
        return;
    }
    for (int p = 0; p < c.n_pred; ++p) {
        if (used[size_t(p)]) continue;
        used[size_t(p)] = 1;
        cur.push_back(p);
        brute_rec(c, gt + 1, used, cur, acc + c.at(p, gt), best, found);
        cur.pop_back();
        used[size_t(p)] = 0;
    }
}

BruteResult brute_force(const CostMatrix& c) {
    BruteResult best;
    bool found = false;
    std::vector<char> used(size_t(c.n_pred), 0);
    std::vector<int> cur;
    brute_rec(c, 0, used, cur, 0.0, best, found);
    return best;
}

CostMatrix random_matrix(Rng& rng, int np, int ng, bool integer_costs) {
    CostMatrix c(np, ng);
    for (double& e : c.entries)
        e = integer_costs ? double(rng.randint(10)) : rng.uniform(-5.0, 5.0);
    return c;
}

}  // namespace

TEST_CASE("hand cases") {
    CostMatrix diag(2, 2);
    diag.at(0, 0) = 0;
    diag.at(0, 1) = 1;
    diag.at(1, 0) = 1;
    diag.at(1, 1) = 0;
    const MatchResult r = assign::solve_assignment(diag);
    REQUIRE(r.pairs.size() == 2);
    CHECK(r.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(r.pairs[1] == std::pair<int, int>{1, 1});
    CHECK(r.total_cost == doctest::Approx(0.0));

    CostMatrix single(1, 1);
    single.at(0, 0) = 5;
    const MatchResult s = assign::solve_assignment(single);
    REQUIRE(s.pairs.size() == 1);
    CHECK(s.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(s.total_cost == doctest::Approx(5.0));
    CHECK(s.unmatched_preds.empty());
}

TEST_CASE("rejects bad input") {
    CostMatrix wide(1, 2);
    CHECK_THROWS(assign::solve_assignment(wide));

    CostMatrix nan(2, 1);
    nan.at(0, 0) = std::nan("");
    CHECK_THROWS(assign::solve_assignment(nan));
}

TEST_CASE("zero ground truth gives empty match, all preds unmatched") {
    CostMatrix c(3, 0);
    const MatchResult r = assign::solve_assignment(c);
    CHECK(r.pairs.empty());
    CHECK(r.total_cost == doctest::Approx(0.0));
    CHECK(r.unmatched_preds == std::vector<int>{0, 1, 2});
}

TEST_CASE("optimal cost equals brute force at every size up to 7") {
    Rng rng(4242);
    for (int n = 1; n <= 7; ++n) {
        for (int m = 0; m <= n; ++m) {
            for (int t = 0; t < 100; ++t) {
                const bool integer_costs = (t % 2) == 0;
                const CostMatrix c = random_matrix(rng, n, m, integer_costs);
                const MatchResult got = assign::solve_assignment(c);
                const BruteResult want = brute_force(c);
                REQUIRE(got.pairs.size() == size_t(m));
                if (integer_costs)
                    CHECK(got.total_cost == doctest::Approx(want.cost));
                else
                    CHECK(std::fabs(got.total_cost - want.cost) <= 1e-9);
            }
        }
    }
}

TEST_CASE("optimality and tie-breaking against brute force") {
    Rng rng(20240817);
    int total = 0;
    for (int t = 0; t < 1000; ++t) {
        const int np = 1 + int(rng.randint(7));
        const int ng = int(rng.randint(uint64_t(np) + 1));
        const bool integer_costs = (t % 2) == 0;
        const CostMatrix c = random_matrix(rng, np, ng, integer_costs);
        const MatchResult got = assign::solve_assignment(c);
        const BruteResult want = brute_force(c);
        REQUIRE(got.pairs.size() == size_t(ng));
        if (integer_costs) {
            CHECK(got.total_cost == doctest::Approx(want.cost));
        } else {
            CHECK(std::fabs(got.total_cost - want.cost) <= 1e-9);
        }
        // Tie rule: lexicographically smallest pair list in gt order. With
        // integer costs ties are common, so compare the full assignment.
        if (integer_costs) {
            for (int g = 0; g < ng; ++g) {
                CHECK(got.pairs[size_t(g)].second == g);
                CHECK(got.pairs[size_t(g)].first == want.pred_of_gt[size_t(g)]);
            }
        }
        ++total;
    }
    CHECK(total == 1000);
}

TEST_CASE("row constant shift leaves the assignment unchanged") {
    Rng rng(55);
    for (int t = 0; t < 50; ++t) {
        const CostMatrix c = random_matrix(rng, 6, 6, false);
        const MatchResult base = assign::solve_assignment(c);
        CostMatrix shifted = c;
        for (int j = 0; j < 6; ++j) shifted.at(2, j) += 3.7;
        const MatchResult moved = assign::solve_assignment(shifted);
        CHECK(moved.pairs == base.pairs);
    }
}

TEST_CASE("permutation equivariance") {
    Rng rng(808);
    const CostMatrix c = random_matrix(rng, 5, 5, false);
    const MatchResult base = assign::solve_assignment(c);

    // Swap two prediction rows; matched pred indices must swap accordingly.
    CostMatrix perm = c;
    for (int j = 0; j < 5; ++j) std::swap(perm.at(1, j), perm.at(3, j));
    const MatchResult swapped = assign::solve_assignment(perm);
    CHECK(swapped.total_cost == doctest::Approx(base.total_cost));
    auto mapped = base.pairs;
    for (auto& pr : mapped) {
        if (pr.first == 1)
            pr.first = 3;
        else if (pr.first == 3)
            pr.first = 1;
    }
    CHECK(swapped.pairs == mapped);
}

TEST_CASE("n=500 solves in under a second") {
    Rng rng(99);
    CostMatrix c(500, 500);
    for (double& e : c.entries) e = rng.uniform(0.0, 1.0);
    const auto t0 = std::chrono::steady_clock::now();
    const MatchResult r = assign::solve_assignment(c);
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    CHECK(r.pairs.size() == 500);
    CHECK(secs < 1.0);

    // Sanity: beats the identity assignment almost surely.
    double diag_cost = 0.0;
    for (int i = 0; i < 500; ++i) diag_cost += c.at(i, i);
    CHECK(r.total_cost <= diag_cost);
}

TEST_CASE("match_cost frozen values") {
    using geom::BoxCCWH;
    const BoxCCWH p{0.5, 0.5, 0.2, 0.2};
    const BoxCCWH g{0.6, 0.5, 0.2, 0.2};

    // Pure L1 weight: |0.5-0.6| = 0.1.
    const CostMatrix l1 = assign::match_cost(std::vector<double>{0.0}, std::vector<BoxCCWH>{p},
                                             std::vector<BoxCCWH>{g}, {0.0, 1.0, 0.0});
    CHECK(l1.at(0, 0) == doctest::Approx(0.1).epsilon(1e-12));

    // Pure giou weight with identical boxes: 1 - giou = 0.
    const CostMatrix gi = assign::match_cost(std::vector<double>{0.0}, std::vector<BoxCCWH>{p},
                                             std::vector<BoxCCWH>{p}, {0.0, 0.0, 1.0});
    CHECK(gi.at(0, 0) == doctest::Approx(0.0).epsilon(1e-12));

    // Saturated objectness + perfect box: entry tends to zero.
    const CostMatrix sat = assign::match_cost(std::vector<double>{40.0}, std::vector<BoxCCWH>{p},
                                              std::vector<BoxCCWH>{p}, {2.0, 5.0, 2.0});
    CHECK(sat.at(0, 0) == doctest::Approx(0.0).epsilon(1e-9));
}
