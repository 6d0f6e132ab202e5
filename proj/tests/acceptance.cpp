// One pass/fail line per acceptance criterion; exit status 1 if any fails.
#include "support.hpp"
#include "vconf/error.hpp"
#include "vconf/harness.hpp"
#include "vconf/toycircuit.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

using namespace vconf;
using clock_type = std::chrono::steady_clock;

namespace {

struct outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(const char * f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// ---------------------------------------------------------------------------
// independent oracles

double ece_exhaustive(const std::vector<double> & c, const std::vector<bool> & y) {
    double total = 0.0;
    for (int b = 0; b < 10; ++b) {
        const double lo = b / 10.0, hi = (b + 1) / 10.0;
        double n = 0, acc = 0, conf = 0;
        for (std::size_t i = 0; i < c.size(); ++i) {
            const bool in = c[i] >= lo && (b == 9 ? c[i] <= 1.0 : c[i] < hi);
            if (!in) continue;
            n += 1;
            acc += y[i] ? 1 : 0;
            conf += c[i];
        }
        if (n > 0) total += n / c.size() * std::abs(acc / n - conf / n);
    }
    return total;
}

double auroc_pairs(const std::vector<double> & s, const std::vector<bool> & y) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] && !y[j]) {
                pairs += 1;
                wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            }
    return wins / pairs;
}

std::vector<double> solve_gauss(std::vector<std::vector<double>> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t p = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
        std::swap(a[c], a[p]);
        std::swap(b[c], b[p]);
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = a[r][c] / a[c][c];
            for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
            b[r] -= f * b[c];
        }
    }
    std::vector<double> x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
        x[i] = s / a[i][i];
    }
    return x;
}

// ridge with unpenalized intercept via the centred normal equations
std::vector<double> ridge_oracle(const matrix & x, const real_vector & y, double lambda, double & intercept) {
    const std::size_t n = x.rows(), p = x.cols();
    std::vector<double> mx(p, 0.0);
    double my = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        my += y[r] / n;
        for (std::size_t c = 0; c < p; ++c) mx[c] += x(r, c) / n;
    }
    std::vector<std::vector<double>> a(p, std::vector<double>(p, 0.0));
    std::vector<double> b(p, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < p; ++i) {
            b[i] += (x(r, i) - mx[i]) * (y[r] - my);
            for (std::size_t j = 0; j < p; ++j) a[i][j] += (x(r, i) - mx[i]) * (x(r, j) - mx[j]);
        }
    for (std::size_t i = 0; i < p; ++i) a[i][i] += lambda;
    const auto w = solve_gauss(a, b);
    intercept = my;
    for (std::size_t i = 0; i < p; ++i) intercept -= w[i] * mx[i];
    return w;
}

double penalized_loglik(const matrix & x, const real_vector & y, const std::array<double, 3> & b, double l2) {
    double ll = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double z = b[0] + b[1] * x(r, 0) + b[2] * x(r, 1);
        ll += y[r] * z - (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)));
    }
    return ll - 0.5 * l2 * (b[1] * b[1] + b[2] * b[2]);
}

std::array<double, 3> logistic_grid(const matrix & x, const real_vector & y, double l2) {
    std::array<double, 3> best{0, 0, 0};
    double half = 8.0;
    const int steps = 10;
    while (half > 1e-7) {
        const auto centre = best;
        double f_best = penalized_loglik(x, y, best, l2);
        for (int i = -steps; i <= steps; ++i)
            for (int j = -steps; j <= steps; ++j)
                for (int k = -steps; k <= steps; ++k) {
                    const std::array<double, 3> b{centre[0] + half * i / steps, centre[1] + half * j / steps,
                                                  centre[2] + half * k / steps};
                    const double f = penalized_loglik(x, y, b, l2);
                    if (f > f_best) {
                        f_best = f;
                        best = b;
                    }
                }
        half *= 0.3;
    }
    return best;
}

// ---------------------------------------------------------------------------

outcome criterion_1() {
    const auto t0 = clock_type::now();
    seeded_rng rng(101);
    double err_ld = 0, err_rec = 0, err_tok = 0, err_rate = 0, err_ece = 0, err_auc = 0;
    const std::size_t cases = 200;
    for (std::size_t c = 0; c < cases; ++c) {
        // logit difference
        const std::size_t k = 2 + rng.below(11);
        logit_row row;
        for (std::size_t i = 0; i < k; ++i) row.logits.push_back(10.0 * rng.normal());
        row.target_class = rng.below(k);
        double others = 0;
        for (std::size_t i = 0; i < k; ++i)
            if (i != row.target_class) others += row.logits[i];
        err_ld = std::max(err_ld, std::abs(logit_difference(row) - (row.logits[row.target_class] - others / (k - 1))));

        // recovery and token recovery
        const double clean = rng.normal() * 5, corrupt = clean - 1.0 - rng.uniform() * 5, patched = rng.normal() * 5;
        err_rec = std::max(err_rec, std::abs(recovery(clean, corrupt, patched) - 100.0 * (patched - corrupt) / (clean - corrupt)));
        const double rc = 0.05 + 0.95 * rng.uniform(), rp = rng.uniform();
        err_tok = std::max(err_tok, std::abs(recovery_token(rc, rp) - 100.0 * (1.0 - rp / rc)));

        // change rate
        const std::size_t n = 1 + rng.below(300);
        std::vector<int> a(n), b(n);
        std::size_t diff = 0;
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = static_cast<int>(rng.below(5));
            b[i] = static_cast<int>(rng.below(5));
            diff += a[i] != b[i];
        }
        err_rate = std::max(err_rate, std::abs(first_token_change_rate(a, b) - static_cast<double>(diff) / n));

        // ECE and AUROC with ties and bin-edge values
        const std::size_t m = 2 + rng.below(400);
        std::vector<double> conf(m);
        std::vector<bool> y(m);
        for (std::size_t i = 0; i < m; ++i) {
            conf[i] = rng.uniform() < 0.3 ? rng.below(11) / 10.0 : rng.uniform();
            y[i] = rng.uniform() < conf[i];
        }
        y[0] = true;
        y[1] = false;
        err_ece = std::max(err_ece, std::abs(ece(conf, y) - ece_exhaustive(conf, y)));
        err_auc = std::max(err_auc, std::abs(auroc(conf, y) - auroc_pairs(conf, y)));
    }
    const double secs = seconds_since(t0);
    const bool pass = err_ld < 1e-10 && err_rec < 1e-10 && err_tok < 1e-10 && err_rate < 1e-12 && err_ece < 1e-10 &&
                      err_auc < 1e-12 && secs < 10;
    std::ostringstream d;
    d << cases << " cases; max err ld " << err_ld << ", recovery " << err_rec << ", token " << err_tok << ", rate "
      << err_rate << ", ece " << err_ece << ", auroc " << err_auc << "; " << fmt("%.2f s", secs);
    return {pass, d.str()};
}

outcome criterion_2() {
    const auto t0 = clock_type::now();
    seeded_rng rng(202);
    double err_ridge = 0;
    for (std::size_t c = 0; c < 100; ++c) {
        const std::size_t n = 8 + rng.below(30), p = 1 + rng.below(5);
        matrix x = testing_support::gaussian(n, p, 1.0 + rng.uniform() * 3, rng);
        real_vector y(n);
        for (auto & v : y) v = rng.normal() * 3 + 1;
        const double lambda = rng.uniform() < 0.2 ? 0.0 : std::exp(rng.normal());
        double b0 = 0;
        const auto w = ridge_oracle(x, y, lambda, b0);
        const auto fit = ridge_fit({x, y, ""}, lambda);
        err_ridge = std::max(err_ridge, std::abs(fit.intercept - b0));
        for (std::size_t i = 0; i < p; ++i) err_ridge = std::max(err_ridge, std::abs(fit.weights[i] - w[i]));
    }

    const matrix x(10, 2, {0.3, -1.2, 1.1, 0.4, -0.7, 0.9, 2.0, 1.5, -1.4, -0.3,
                           0.8, -0.9, -0.2, 2.1, 1.6, -1.1, -2.2, 0.6, 0.1, 0.05});
    const real_vector y{1, 1, 0, 1, 0, 1, 0, 0, 1, 0};
    const auto fit = logistic_fit({x, y, ""}, {1.0, 100, 1e-8});
    const auto grid = logistic_grid(x, y, 1.0);
    const auto scores = decision_scores(fit, x);
    double err_log = 0;
    for (std::size_t r = 0; r < 10; ++r)
        err_log = std::max(err_log, std::abs(scores[r] - (grid[0] + grid[1] * x(r, 0) + grid[2] * x(r, 1))));

    // 5-fold CV twice under one seed, for both fitters
    const std::size_t n = 200;
    matrix cx = testing_support::gaussian(n, 6, 1.0, rng);
    real_vector cy(n), cb(n);
    for (std::size_t r = 0; r < n; ++r) {
        cy[r] = cx(r, 0) - 0.5 * cx(r, 3) + rng.normal();
        cb[r] = cy[r] > 0 ? 1 : 0;
    }
    bool reproducible = true;
    for (auto kind : {probe_kind::ridge, probe_kind::logistic}) {
        cv_options o;
        o.k = 5;
        o.seed = 17;
        o.fitter = kind;
        o.metric = kind == probe_kind::ridge ? probe_metric::r2 : probe_metric::auroc;
        const dataset d{cx, kind == probe_kind::ridge ? cy : cb, ""};
        const auto a = kfold_cv(d, o), b = kfold_cv(d, o);
        reproducible = reproducible && a.cv_scores == b.cv_scores && a.weights == b.weights && a.intercept == b.intercept;
    }
    const double secs = seconds_since(t0);
    const bool pass = err_ridge < 1e-10 && fit.gradient_norm < 1e-6 && err_log < 1e-4 && reproducible && secs < 30;
    std::ostringstream d;
    d << "ridge max err " << err_ridge << "; logistic grad " << fit.gradient_norm << ", score err vs grid " << err_log
      << "; cv reproducible " << (reproducible ? "yes" : "no") << "; " << fmt("%.2f s", secs);
    return {pass, d.str()};
}

outcome criterion_3() {
    const auto t0 = clock_type::now();
    const auto model = testing_support::random_model(303, 4);
    seeded_rng rng(303);
    const std::size_t passes = 200;
    bool deterministic = true, blocked_zero = true, causal_zero = true;
    double prefix_err = 0, row_err = 0;
    capture_filter cap = capture_filter::everything();
    cap.all_logits = true;
    for (std::size_t c = 0; c < passes; ++c) {
        const auto toks = testing_support::random_tokens(3 + rng.below(10), 32, rng);
        const std::size_t n = toks.size();
        const auto a = forward(model, toks, {}, cap);
        deterministic = deterministic && a == forward(model, toks, {}, cap);

        const std::size_t cut = 1 + rng.below(n - 1);
        const auto part = forward(model, std::vector<token_id>(toks.begin(), toks.begin() + cut));
        const auto & want = a.logits_at(cut - 1);
        const auto & got = part.last_logits();
        for (std::size_t i = 0; i < want.size(); ++i) prefix_err = std::max(prefix_err, std::abs(want[i] - got[i]));

        hook_set hooks;
        const std::size_t target = 1 + rng.below(n - 1), source = rng.below(target);
        const std::size_t lb = rng.below(4), le = lb + 1 + rng.below(4 - lb);
        hooks.attention_blocks.insert({target, source, lb, le});
        const auto blocked = forward(model, toks, hooks, cap);
        for (std::size_t l = 0; l < 4; ++l)
            for (std::size_t h = 0; h < model.config().n_heads; ++h)
                for (const auto * tr : {&a, &blocked}) {
                    const auto & w = attention_weights(*tr, l, h);
                    for (std::size_t i = 0; i < n; ++i) {
                        double s = 0;
                        for (std::size_t j = 0; j < n; ++j) {
                            if (j > i && w(i, j) != 0.0) causal_zero = false;
                            s += w(i, j);
                        }
                        row_err = std::max(row_err, std::abs(s - 1.0));
                    }
                    if (tr == &blocked && l >= lb && l < le && w(target, source) != 0.0) blocked_zero = false;
                }
    }
    const double secs = seconds_since(t0);
    const bool pass = deterministic && prefix_err < 1e-10 && row_err < 1e-9 && blocked_zero && causal_zero && secs < 60;
    std::ostringstream d;
    d << passes << " fuzzed passes; deterministic " << (deterministic ? "yes" : "no") << ", prefix err " << prefix_err
      << ", row-sum err " << row_err << ", blocked exact " << (blocked_zero ? "yes" : "no") << ", causal exact "
      << (causal_zero ? "yes" : "no") << "; " << fmt("%.2f s", secs);
    return {pass, d.str()};
}

outcome criterion_4(const planted_model & planted, const std::vector<trial> & trials) {
    const auto & m = planted.model;
    const auto part = partition_trials(trials, {7, 8, 9}, {1, 2, 3}, 30, 30, 4);
    std::vector<activation_trace> hi, lo;
    for (const auto & t : part.high) hi.push_back(forward(m, t.token_ids, {}, capture_filter::everything()));
    for (const auto & t : part.low) lo.push_back(forward(m, t.token_ids, {}, capture_filter::everything()));
    std::vector<trace_view> hv, lv;
    for (std::size_t i = 0; i < hi.size(); ++i) hv.push_back({part.high[i].positions, hi[i]});
    for (std::size_t i = 0; i < lo.size(); ++i) lv.push_back({part.low[i].positions, lo[i]});

    double worst = 0;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        const auto & t = trials[trials.size() - 1 - i];
        const auto clean = forward(m, t.token_ids, {}, capture_filter::everything());
        for (std::size_t layer = 0; layer < m.config().n_layers; ++layer)
            for (role r : {role::panl, role::panl_plus1, role::cc, role::last_a, role::first_a}) {
                const auto sv = build_steering_vector(hv, lv, layer, r);
                for (double alpha : {2.0, 5.0})
                    for (const auto & v : {sv, sv.negated()}) {
                        auto s = v;
                        s.alpha = alpha;
                        const auto steered = forward(m, t.token_ids, apply_steering(s, t.positions),
                                                     capture_filter::everything());
                        const auto & a = clean.residual_at(layer, t.positions.at(r));
                        const auto & b = steered.residual_at(layer, t.positions.at(r));
                        double dn = 0, an = 0;
                        for (std::size_t k = 0; k < a.size(); ++k) {
                            dn += (b[k] - a[k]) * (b[k] - a[k]);
                            an += a[k] * a[k];
                        }
                        worst = std::max(worst, std::abs(std::sqrt(dn / an) - 0.03 * alpha));
                        ++checked;
                    }
            }
    }
    std::ostringstream d;
    d << checked << " (trial, layer, role, alpha, sign) cells; max |ratio - 0.03 alpha| " << worst;
    return {worst < 1e-9, d.str()};
}

const metrics_report * find(const experiment_result & r, const std::string & cond, std::size_t layer,
                            const std::string & pos) {
    for (const auto & rep : r.reports)
        if (rep.condition == cond && rep.layer == layer && rep.position == pos) return &rep;
    return nullptr;
}

outcome criterion_5(const planted_model & planted, const std::vector<trial> & trials) {
    const auto t0 = clock_type::now();
    const auto & m = planted.model;
    const std::size_t L = planted.spec.n_layers, cache = planted.spec.cache_layer, retrieve = planted.spec.retrieve_layer;
    std::ostringstream d;
    bool all = true;
    auto part = [&](const char * name, bool ok) {
        d << name << (ok ? " ok" : " FAIL") << "; ";
        all = all && ok;
    };

    experiment_config base;
    base.seed = 5;
    base.max_trials = 240;

    // (a) temporal precedence
    {
        auto c = base;
        c.kind = experiment_kind::probe;
        c.roles = {role::panl, role::cc};
        c.targets = {"high_confidence"};
        const auto r = run_experiment(c, m, trials);
        bool ok = r.probes.size() == 2 * L;
        double cc_between = 0;
        for (const auto & row : r.probes) {
            const double s = row.result.mean_score;
            if (row.position == "PANL" && row.layer >= cache) ok = ok && s >= 0.95;
            if (row.position == "CC" && row.layer >= retrieve) ok = ok && s >= 0.95;
            if (row.position == "CC" && row.layer < retrieve) cc_between = std::max(cc_between, s);
        }
        ok = ok && cc_between < 0.6;
        d << "max CC auroc before retrieve " << fmt("%.3f", cc_between) << ", ";
        part("(a) precedence", ok);
    }

    // (b) and (c) attention knockout
    {
        auto c = base;
        c.kind = experiment_kind::block;
        const auto r = run_experiment(c, m, trials);
        double qa = 0;
        std::optional<std::size_t> first_cache, first_retrieve;
        for (std::size_t center = 0; center < L; ++center) {
            qa = std::max(qa, find(r, "window=3", center, "CC->Q+A")->change_rate());
            if (!first_cache && find(r, "window=3", center, "PANL->LAST_A")->change_rate() > 0.9) first_cache = center;
            if (!first_retrieve && find(r, "window=3", center, "CC->PANL")->change_rate() > 0.9) first_retrieve = center;
        }
        const double at_retrieve = find(r, "window=3", retrieve, "CC->PANL")->change_rate();
        const double at_cache = find(r, "window=3", cache, "PANL->LAST_A")->change_rate();
        d << "CC->Q+A max " << fmt("%.3f", qa) << ", CC->PANL at retrieve " << fmt("%.3f", at_retrieve) << ", ";
        part("(b) JIT refutation", qa < 0.02 && at_retrieve > 0.9);
        part("(c) pathway order", at_cache > 0.9 && at_retrieve > 0.9 && first_cache && first_retrieve &&
                                      *first_cache < *first_retrieve);
    }

    // (d) corrupt-then-restore
    {
        auto c = base;
        c.kind = experiment_kind::patch;
        c.max_trials = 200;
        const auto r = run_experiment(c, m, trials);
        auto rec = [&](std::size_t layer, const char * pos) {
            const auto * rep = find(r, "restore", layer, pos);
            return rep && rep->extras.count("recovery_logit") ? rep->extras.at("recovery_logit") : -1e9;
        };
        double cc_min = 1e9, panl_min = 1e9, plus1_max = -1e9;
        for (std::size_t l = retrieve; l < L; ++l) cc_min = std::min(cc_min, rec(l, "CC"));
        for (std::size_t l = cache; l < retrieve; ++l) panl_min = std::min(panl_min, rec(l, "PANL"));
        for (std::size_t l = 0; l < L; ++l) plus1_max = std::max(plus1_max, rec(l, "PANL_PLUS1"));
        d << "recovery CC " << fmt("%.1f", cc_min) << "%, PANL " << fmt("%.1f", panl_min) << "%, PANL+1 "
          << fmt("%.1f", plus1_max) << "%, ";
        part("(d) patching", cc_min > 90 && panl_min > 50 && plus1_max < 5 && r.reports.front().trials.size() >= 200);
    }

    // (e) swaps at the cache window, plus self-swap identity
    {
        auto c = base;
        c.kind = experiment_kind::swap;
        c.layers = {cache};
        c.roles = {role::panl};
        c.max_trials = std::nullopt;
        const auto r = run_experiment(c, m, trials);
        auto abs_change = [&](const char * cond) { return find(r, cond, cache, "PANL")->extras.at("abs_confidence_change"); };
        const double cross = (abs_change("H->L") + abs_change("L->H")) / 2;
        const double same = (abs_change("H->H") + abs_change("L->L")) / 2;
        std::size_t recipients = 0;
        for (const auto & rep : r.reports) recipients += rep.trials.size();
        bool identity = true;
        for (std::size_t i = 0; i < 200; ++i) {
            const auto & t = trials[i];
            const auto clean = forward(m, t.token_ids, {}, capture_filter::everything());
            swap_plan p{t.id, t.id, swap_condition::high_to_high, cache, role::panl};
            identity = identity && forward(m, t.token_ids, swap_activation(p, clean, t.positions, t.positions),
                                           capture_filter::everything()) == clean;
        }
        d << "swap |dconf| cross " << fmt("%.3f", cross) << " vs same " << fmt("%.3f", same) << ", ";
        part("(e) swaps", cross >= 5 * same && identity && recipients >= 200);
    }

    // (f) noising
    {
        auto c = base;
        c.kind = experiment_kind::noise;
        c.max_trials = 200;
        const auto r = run_experiment(c, m, trials);
        const double panl = find(r, "mean_ablate", cache, "PANL")->change_rate();
        const double cc = find(r, "mean_ablate", retrieve, "CC")->change_rate();
        double plus1 = 0;
        for (std::size_t l = 0; l < L; ++l) plus1 = std::max(plus1, find(r, "mean_ablate", l, "PANL_PLUS1")->change_rate());
        d << "noise rate PANL " << fmt("%.3f", panl) << ", CC " << fmt("%.3f", cc) << ", PANL+1 " << fmt("%.3f", plus1)
          << ", ";
        part("(f) noising", panl > 0 && cc > 0 && panl >= 10 * plus1 && cc >= 10 * plus1);
    }
    const double secs = seconds_since(t0);
    d << fmt("%.1f s", secs);
    return {all && secs < 300, d.str()};
}

outcome criterion_6(const planted_model & planted) {
    planted_trial_options opts;
    const double want_ece = expected_planted_ece(500, opts);
    const double want_auc = analytic_planted_auroc(opts);
    const auto trials = gen_planted_trials(planted.spec, 500, 606, opts);
    experiment_config c;
    c.kind = experiment_kind::calibrate;
    const auto r = run_experiment(c, planted.model, trials);
    const auto & cal = *r.calibration;
    std::ostringstream d;
    d << "ece " << fmt("%.4f", cal.ece) << " vs " << fmt("%.4f", want_ece) << ", auroc " << fmt("%.4f", cal.auroc)
      << " vs " << fmt("%.4f", want_auc) << ", unparseable " << cal.unparseable;
    return {std::abs(cal.ece - want_ece) <= 0.03 && std::abs(cal.auroc - want_auc) <= 0.03 && cal.n == 500, d.str()};
}

outcome criterion_7() {
    // y = b * logprob + e with b^2 / (b^2 + 1) = 0.084
    const double beta = std::sqrt(0.084 / (1 - 0.084));
    seeded_rng rng(707);
    const std::size_t n = 3000;
    matrix lp(n, 1), resid(n, 1), dup(n, 1);
    real_vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        lp(i, 0) = rng.normal();
        const double e = rng.normal();
        y[i] = beta * lp(i, 0) + e;
        resid(i, 0) = e;
        dup(i, 0) = lp(i, 0);
    }
    const dataset base{lp, y, "logprob"};
    const auto comp = variance_partition(base, {resid, y, "complement"}, y, 1e-6, 5, 7);
    const auto copy = variance_partition(base, {dup, y, "duplicate"}, y, 1.0, 5, 7);
    std::ostringstream d;
    d << "baseline r2 " << fmt("%.4f", comp.r2_baseline) << ", complement unique " << fmt("%.4f", comp.unique_r2)
      << " vs " << fmt("%.4f", 1 - comp.r2_baseline) << ", duplicate unique " << copy.unique_r2;
    return {std::abs(comp.r2_baseline - 0.084) <= 0.02 && std::abs(comp.unique_r2 - (1 - comp.r2_baseline)) <= 0.03 &&
                std::abs(copy.unique_r2) < 0.02,
            d.str()};
}

std::string slurp_outputs(const std::filesystem::path & dir) {
    std::string all;
    for (const char * f :
         {"trials.csv", "aggregate.json", "plot_data.csv", "probe_sweep.csv", "calibration.csv", "calibration.json"}) {
        std::ifstream in(dir / f, std::ios::binary);
        all += f;
        all += ':';
        all += std::string(std::istreambuf_iterator<char>(in), {});
    }
    return all;
}

outcome criterion_8(const planted_model & planted, const std::vector<trial> & trials) {
    const auto root = std::filesystem::temp_directory_path() / "vconf_acceptance_repro";
    std::filesystem::remove_all(root);
    std::ostringstream d;
    bool ok = true;
    for (auto kind : {experiment_kind::calibrate, experiment_kind::steer, experiment_kind::patch, experiment_kind::noise,
                      experiment_kind::swap, experiment_kind::block, experiment_kind::probe}) {
        experiment_config c;
        c.kind = kind;
        c.layers = {2, 3, 6};
        c.seed = 8;
        c.max_trials = 120;
        c.n_high = c.n_low = 25;
        std::vector<std::string> outs;
        int run = 0;
        for (std::size_t workers : {1, 1, 8}) {
            const auto dir = root / (std::string(to_string(kind)) + "_" + std::to_string(run++));
            export_results(run_experiment(c, planted.model, trials, workers), dir);
            outs.push_back(slurp_outputs(dir));
        }
        const bool same = outs[0] == outs[1] && outs[0] == outs[2];
        ok = ok && same;
        d << to_string(kind) << (same ? " identical" : " DIFFERS") << "; ";
    }
    std::filesystem::remove_all(root);
    std::string detail = d.str();
    detail.resize(detail.size() - 2);
    return {ok, detail};
}

} // namespace

int main() {
    const planted_model planted = build_planted(planted_spec{}, 7);
    const auto trials = gen_planted_trials(planted.spec, 900, 21);

    const std::vector<std::pair<int, std::function<outcome()>>> criteria = {
        {1, criterion_1},
        {2, criterion_2},
        {3, criterion_3},
        {4, [&] { return criterion_4(planted, trials); }},
        {5, [&] { return criterion_5(planted, trials); }},
        {6, [&] { return criterion_6(planted); }},
        {7, criterion_7},
        {8, [&] { return criterion_8(planted, trials); }},
    };
    int failures = 0;
    for (const auto & [id, run] : criteria) {
        outcome o;
        try {
            o = run();
        } catch (const std::exception & e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("criterion %d: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
