// End-to-end acceptance run. Prints one PASS/FAIL line per criterion with the
// measured quantities and a summary line. A completed run exits 0 whatever the
// verdicts; with --strict any failing criterion makes the exit status 1.
// --report FILE also writes the lines to FILE.

#include "sss/pipeline.hpp"
#include "checks.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace sss;
using Clock = std::chrono::steady_clock;

// Pinned tolerances.
constexpr double kOracleTangentTol = 1e-6;    // m, tangent norm
constexpr double kOracleTimeLimit = 300.0;    // s
constexpr double kDriftAteRatio = 0.7;
constexpr double kDriftTimeLimit = 900.0;     // s per run
constexpr int kDriftSeeds = 5;
constexpr double kRecallGain = 0.20;
constexpr double kHeightmapLineFraction = 0.8;
constexpr double kJacobianTol = 1e-5;
constexpr double kWarmColdTol = 1e-6;
constexpr double kZnccShiftTol = 1e-9;
constexpr double kSquareOracleTol = 1e-6;
constexpr double kZeroNoiseSlack = 1e-6;      // m, allowed ATE excess when there is no drift
constexpr int kWorkerThreads = 4;

struct Timed {
    Dataset ds;
    PipelineResult res;
    EvalReport rep;
    double seconds = 0.0;
};

Timed run_scenario(const SimulationConfig& sc, const PipelineConfig& pc = {})
{
    Timed t;
    t.ds = simulate_dataset(sc);
    const auto t0 = Clock::now();
    t.res = run(t.ds, pc);
    t.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    t.rep = evaluate(t.ds, t.res, pc);
    return t;
}

SimulationConfig drift_scenario(std::uint64_t seed, double sigma = 0.01)
{
    SimulationConfig sc;
    sc.seed = seed;
    sc.drift.yaw_noise_sigma = sigma;
    return sc;
}

std::string fmt(const char* f, auto... v)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, v...);
    return buf;
}

int failures = 0;
std::ofstream report_file;

void say(const std::string& line)
{
    std::cout << line << std::endl;
    if (report_file.is_open())
        report_file << line << std::endl;
}

void report(int id, bool pass, const std::string& detail)
{
    failures += !pass;
    say("criterion " + std::to_string(id) + ": " + (pass ? "PASS" : "FAIL") + "  " + detail);
}

std::string dump(const Timed& t)
{
    std::ostringstream os;
    write_trajectory_csv(os, trajectory_records(t.ds, t.res.poses));
    for (const auto* e : t.res.final_edges())
        write_edge(os, e->edge);
    write_point_cloud(os, positions(t.res.map));
    return os.str();
}

bool graph_costs_monotone(const PipelineResult& res)
{
    for (const auto& r : res.graph_reports)
        for (std::size_t i = 1; i < r.accepted_costs.size(); ++i)
            if (r.accepted_costs[i] > r.accepted_costs[i - 1])
                return false;
    return true;
}

void criterion1()
{
    const Timed t = run_scenario(SimulationConfig::zero_noise());
    double worst = 0.0;
    for (std::size_t i = 0; i < t.res.poses.size(); ++i)
        worst = std::max(worst, log_residual(t.ds.truth[i], t.res.poses[i]).norm());
    report(1, worst < kOracleTangentTol && t.seconds < kOracleTimeLimit,
           fmt("zero-noise %zu pings, max tangent error %.3g (tol %.0e), %d edges, %.1f s (limit %.0f s)",
               t.ds.pings.size(), worst, kOracleTangentTol, t.res.status.edges_accepted, t.seconds, kOracleTimeLimit));
}

/// Criteria 2, 3 and 5 share the default-seed run; criterion 4 reuses it at sigma 0.01.
Timed criteria_2_3_5()
{
    std::vector<Timed> runs;
    bool ok = true;
    std::string detail;
    for (int s = 1; s <= kDriftSeeds; ++s) {
        runs.push_back(run_scenario(drift_scenario(s)));
        const Timed& t = runs.back();
        const double ratio = t.rep.ate_est / t.rep.ate_dr;
        ok = ok && ratio <= kDriftAteRatio && t.seconds < kDriftTimeLimit;
        detail += fmt("seed %d: DR %.3f m EST %.3f m ratio %.3f (%.0f s, %d edges); ", s, t.rep.ate_dr,
                      t.rep.ate_est, ratio, t.seconds, t.res.status.edges_accepted);
    }
    report(2, ok, detail + fmt("ratio limit %.2f", kDriftAteRatio));

    const Timed& d = runs.front();
    bool ok3 = true;
    int adjacent = 0;
    std::string d3;
    for (const auto& p : d.rep.pairs) {
        if (std::abs(p.image_a - p.image_b) != 1)
            continue;
        ++adjacent;
        const double gain = p.recall - p.init_recall;
        ok3 = ok3 && gain >= kRecallGain;
        d3 += fmt("%d-%d: %.3f -> %.3f (%+.3f); ", p.image_a, p.image_b, p.init_recall, p.recall, gain);
    }
    report(3, ok3 && adjacent > 0, d3 + fmt("required gain %.2f", kRecallGain));

    int better = 0;
    std::string d5;
    for (const auto& l : d.rep.lines) {
        better += l.mae_est <= l.mae_dr;
        d5 += fmt("line %d: DR %.3f EST %.3f; ", l.line, l.mae_dr, l.mae_est);
    }
    const double frac = d.rep.lines.empty() ? 0.0 : static_cast<double>(better) / d.rep.lines.size();
    report(5, frac >= kHeightmapLineFraction,
           d5 + fmt("EST <= DR on %d/%zu lines (required %.0f%%)", better, d.rep.lines.size(),
                    100 * kHeightmapLineFraction));
    return runs.front();
}

void criterion4(const Timed& at_001)
{
    bool ok = true;
    std::string detail;
    for (double sigma : {0.0, 0.01, 0.02, 0.03, 0.05}) {
        std::optional<Timed> t;
        if (sigma != 0.01)
            t = run_scenario(drift_scenario(1, sigma));
        const Timed& r = t ? *t : at_001;
        const double dr = r.rep.ate_dr, est = r.rep.ate_est;
        const auto& st = r.res.status;
        detail += fmt("sigma %.2f: DR %.3f EST %.3f", sigma, dr, est);
        if (sigma == 0.0) {
            ok = ok && est <= dr + kZeroNoiseSlack;
        } else if (sigma <= 0.03) {
            ok = ok && est < dr;
        } else {
            // Reported, not required to improve.
            detail += fmt(" ratio %.3f %s, edges accepted %d rejected %d, loop chi2 mean %.2f max %.2f, "
                          "inconsistent loops %d",
                          est / dr, est < dr ? "improved" : "DEGRADED", st.edges_accepted, st.edges_rejected,
                          st.loop_chi2_mean, st.loop_chi2_max, st.loops_inconsistent);
            for (const auto& [reason, n] : st.rejections)
                detail += fmt(", rejected[%s] %d", reason.c_str(), n);
        }
        detail += "; ";
    }
    report(4, ok, detail);
}

void criterion6(const Timed& d)
{
    const double jb = test::between_jacobian_error();
    const double jp = test::prior_jacobian_error();
    const double jm = test::measurement_jacobian_error();
    const test::WarmColdCheck wc = test::warm_cold_check();
    const test::SquareCheck sq = test::square_check();
    const bool mono = wc.monotone && sq.monotone && graph_costs_monotone(d.res);
    report(6, jb < kJacobianTol && jp < kJacobianTol && jm < kJacobianTol && mono && wc.max_gap < kWarmColdTol,
           fmt("jacobian rel err between %.2e prior %.2e measurement %.2e (tol %.0e); LM monotone %s; "
               "warm vs cold %.2e (tol %.0e)",
               jb, jp, jm, kJacobianTol, mono ? "yes" : "NO", wc.max_gap, kWarmColdTol));
}

void criterion7(const Timed& d)
{
    const auto s = test::pair_scene();
    MatchParams mp;
    Nnf init = initialize(s.geo_a, s.geo_b, s.mask_a, s.mask_b, mp);
    evaluate(init, PatchMatcher(s.a.intensities, s.mask_a, s.b.intensities, s.mask_b, mp.patch_size));
    test::MonotoneObserver obs;
    obs.prev = init.distances;
    match(s.a, s.b, s.geo_a, s.geo_b, s.mask_a, s.mask_b, mp, &obs);

    const test::Scene sc = test::make_scene(5000, 7);
    const RansacResult rr =
        ransac_estimate(test::tilt_held_problem(sc), test::contaminate(sc, 0.3, 7));
    int ransac_bad = test::ransac_history_violations(rr);
    std::size_t updates = rr.history.size();
    for (const auto& e : d.res.edges) {
        RansacResult h;
        h.history = e.history;
        ransac_bad += test::ransac_history_violations(h);
        updates += e.history.size();
    }

    const double zncc = test::zncc_affine_shift();
    const int kd = test::kdtree_mismatches();
    report(7, obs.violations == 0 && obs.steps > 0 && ransac_bad == 0 && zncc < kZnccShiftTol && kd == 0,
           fmt("NNF increases %d over %d steps; RANSAC non-decreasing updates %d of %zu; ZNCC affine shift %.2e "
               "(tol %.0e); kd-tree mismatches %d of 100000",
               obs.violations, obs.steps, ransac_bad, updates, zncc, kZnccShiftTol, kd));
}

void criterion8(const Timed& d)
{
    const Timed a = run_scenario(drift_scenario(1));
    set_thread_count(1);
    const Timed b = run_scenario(drift_scenario(1));
    set_thread_count(kWorkerThreads);
    const std::string ref = dump(d);
    const bool same_a = dump(a) == ref, same_b = dump(b) == ref;
    report(8, same_a && same_b,
           fmt("trajectory+edges+cloud %zu bytes; repeat with %d threads %s; single thread %s", ref.size(),
               kWorkerThreads, same_a ? "identical" : "DIFFERS", same_b ? "identical" : "DIFFERS"));
}

void criterion9()
{
    const test::SquareCheck sq = test::square_check();
    report(9, sq.max_error < kSquareOracleTol && sq.oracle_is_minimum,
           fmt("max deviation from brute-force solution %.2e (tol %.0e), final gradient %.2e", sq.max_error,
               kSquareOracleTol, sq.gradient_norm));
}

}  // namespace

int main(int argc, char** argv)
{
    bool strict = false;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--strict") {
            strict = true;
        } else if (a == "--report" && i + 1 < argc) {
            report_file.open(argv[++i]);
        } else {
            std::cerr << "usage: sss_acceptance [--strict] [--report FILE]\n";
            return 2;
        }
    }
    try {
        set_thread_count(kWorkerThreads);
        criterion1();
        const Timed d = criteria_2_3_5();
        criterion4(d);
        criterion6(d);
        criterion7(d);
        criterion8(d);
        criterion9();
    } catch (const std::exception& e) {
        say(std::string("acceptance aborted: ") + e.what());
        return 1;
    }
    say((failures ? "FAILED " : "ALL PASSED ") + std::to_string(failures) + " criteria failing");
    return strict && failures ? 1 : 0;
}
