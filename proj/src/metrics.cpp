#include "t3po/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace t3po {

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("accuracy: length mismatch");
    }
    if (predictions.empty()) {
        throw std::invalid_argument("accuracy: empty input");
    }
    size_t hits = 0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double auroc(std::span<const double> closed_scores, std::span<const double> open_scores) {
    if (closed_scores.empty() || open_scores.empty()) {
        throw std::invalid_argument("auroc: both score lists must be nonempty");
    }
    const size_t n = closed_scores.size();
    const size_t m = open_scores.size();

    struct Entry {
        double score;
        bool closed;
    };
    std::vector<Entry> all;
    all.reserve(n + m);
    for (double s : closed_scores) all.push_back({s, true});
    for (double s : open_scores) all.push_back({s, false});
    std::sort(all.begin(), all.end(),
              [](const Entry& a, const Entry& b) { return a.score < b.score; });

    // Midranks over tie groups; rank sums are exact in double (multiples
    // of one half), so the U statistic matches pairwise counting exactly.
    double rank_sum_closed = 0.0;
    size_t i = 0;
    while (i < all.size()) {
        size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t k = i; k < j; ++k) {
            if (all[k].closed) rank_sum_closed += midrank;
        }
        i = j;
    }
    const double u = rank_sum_closed - static_cast<double>(n) * (static_cast<double>(n) + 1.0) / 2.0;
    return u / (static_cast<double>(n) * static_cast<double>(m));
}

AggregateResult aggregate(const std::vector<RunResult>& runs) {
    if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
    AggregateResult out;
    out.split_id = runs.front().split_id;
    out.scorer_id = runs.front().scorer_id;
    out.n_runs = runs.size();
    for (const RunResult& r : runs) {
        if (r.split_id != out.split_id || r.scorer_id != out.scorer_id) {
            throw std::invalid_argument("aggregate: mixed split or scorer ids");
        }
        out.seeds.push_back(r.seed);
        out.mean_acc += r.closed_acc;
        out.mean_auc += r.closed_open_auc;
    }
    const double n = static_cast<double>(out.n_runs);
    out.mean_acc /= n;
    out.mean_auc /= n;
    if (out.n_runs > 1) {
        // Identical runs report exactly zero width; summing squared
        // deviations from a rounded mean would leave ulp-level residue.
        auto half_width = [&](auto metric) {
            bool all_equal = true;
            double mean = 0.0;
            for (const RunResult& r : runs) {
                all_equal = all_equal && metric(r) == metric(runs.front());
                mean += metric(r);
            }
            if (all_equal) return 0.0;
            mean /= n;
            double var = 0.0;
            for (const RunResult& r : runs) var += (metric(r) - mean) * (metric(r) - mean);
            var /= n - 1.0;
            return student_t_975(static_cast<int>(out.n_runs) - 1) * std::sqrt(var / n);
        };
        out.ci95_acc = half_width([](const RunResult& r) { return r.closed_acc; });
        out.ci95_auc = half_width([](const RunResult& r) { return r.closed_open_auc; });
    }
    return out;
}

BoldMarks bold_rule(const std::vector<AggregateResult>& aggregates, bool by_auc) {
    if (aggregates.empty()) throw std::invalid_argument("bold_rule: no aggregates");
    auto mean_of = [by_auc](const AggregateResult& a) { return by_auc ? a.mean_auc : a.mean_acc; };
    auto ci_of = [by_auc](const AggregateResult& a) { return by_auc ? a.ci95_auc : a.ci95_acc; };

    const AggregateResult* best = &aggregates.front();
    for (const AggregateResult& a : aggregates) {
        if (mean_of(a) > mean_of(*best)) best = &a;
    }
    BoldMarks marks;
    marks.best = best->scorer_id;
    const double cutoff = mean_of(*best) - ci_of(*best);
    for (const AggregateResult& a : aggregates) {
        if (mean_of(a) >= cutoff) marks.bold.insert(a.scorer_id);
    }
    return marks;
}

namespace {

// Regularized incomplete beta I_x(a, b) by continued fraction (Lentz).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log(1.0 - x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return bt * betacf(a, b, x) / a;
    }
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

// P(T <= t) for Student-t with df degrees of freedom, t >= 0.
double student_t_cdf(double t, int df) {
    const double x = df / (df + t * t);
    return 1.0 - 0.5 * inc_beta(df / 2.0, 0.5, x);
}

}  // namespace

double student_t_975(int df) {
    if (df < 1) throw std::invalid_argument("student_t_975: df must be >= 1");
    double lo = 0.0;
    double hi = 1000.0;  // covers df = 1 (12.71)
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (student_t_cdf(mid, df) < 0.975) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

}  // namespace t3po
