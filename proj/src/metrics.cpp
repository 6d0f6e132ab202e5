#include "vconf/metrics.hpp"

#include "vconf/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace vconf {

using nlohmann::json;

const char * to_string(lexicon_kind k) {
    switch (k) {
    case lexicon_kind::categorical:  return "categorical";
    case lexicon_kind::numeric0_100: return "numeric0_100";
    case lexicon_kind::numeric0_9:   return "numeric0_9";
    }
    return "?";
}

lexicon_kind parse_lexicon_kind(std::string_view s) {
    if (s == "categorical") return lexicon_kind::categorical;
    if (s == "numeric0_100") return lexicon_kind::numeric0_100;
    if (s == "numeric0_9") return lexicon_kind::numeric0_9;
    throw error(error_kind::config, "unknown lexicon kind \"" + std::string(s) + "\"");
}

confidence_lexicon::confidence_lexicon(lexicon_kind kind, std::vector<confidence_class> classes)
    : kind_(kind), classes_(std::move(classes)) {
    if (classes_.empty()) throw error(error_kind::validation, "lexicon has no classes");
    std::set<std::string> seen;
    for (const auto & c : classes_) {
        if (!seen.insert(c.first_token).second)
            throw error(error_kind::validation, "first token \"" + c.first_token + "\" is shared by two classes");
    }
    constexpr double tol = 1e-12;
    if (std::abs(classes_.front().lo) > tol || std::abs(classes_.back().hi - 1.0) > tol)
        throw error(error_kind::validation, "class ranges must cover [0, 1]");
    for (std::size_t k = 0; k < classes_.size(); ++k) {
        if (!(classes_[k].lo < classes_[k].hi))
            throw error(error_kind::validation, "class \"" + classes_[k].label + "\" has an empty range");
        if (k > 0 && std::abs(classes_[k].lo - classes_[k - 1].hi) > tol)
            throw error(error_kind::validation, "class ranges must be contiguous and ordered");
    }
}

const confidence_class & confidence_lexicon::at(std::size_t k) const {
    if (k >= classes_.size()) throw error(error_kind::validation, "class index " + std::to_string(k) + " out of range");
    return classes_[k];
}

std::optional<std::size_t> confidence_lexicon::class_of_token(token_id id) const {
    for (std::size_t k = 0; k < classes_.size(); ++k)
        if (classes_[k].first_token_id == id) return k;
    return std::nullopt;
}

std::vector<token_id> confidence_lexicon::first_token_ids() const {
    std::vector<token_id> ids;
    for (const auto & c : classes_) ids.push_back(c.first_token_id);
    return ids;
}

confidence_lexicon confidence_lexicon::resolved(const tokenizer & tok) const {
    auto classes = classes_;
    std::set<token_id> ids;
    for (auto & c : classes) {
        c.first_token_id = tok.id_of(c.first_token);
        if (!ids.insert(c.first_token_id).second)
            throw error(error_kind::validation, "two classes resolve to the same first token id");
    }
    return confidence_lexicon(kind_, std::move(classes));
}

confidence_lexicon confidence_lexicon::from_json(const json & j) {
    try {
        std::vector<confidence_class> classes;
        for (const auto & c : j.at("classes")) {
            confidence_class cls;
            cls.label = c.at("label").get<std::string>();
            cls.first_token = c.at("first_token").get<std::string>();
            cls.lo = c.at("lo").get<double>();
            cls.hi = c.at("hi").get<double>();
            classes.push_back(std::move(cls));
        }
        return confidence_lexicon(parse_lexicon_kind(j.at("kind").get<std::string>()), std::move(classes));
    } catch (const json::exception & e) {
        throw error(error_kind::config, std::string("lexicon: ") + e.what());
    }
}

confidence_lexicon confidence_lexicon::load(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) throw error(error_kind::io, "cannot open " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::parse_error & e) {
        throw error(error_kind::parse, path.string() + ": " + e.what());
    }
}

json confidence_lexicon::to_json() const {
    json classes = json::array();
    for (const auto & c : classes_)
        classes.push_back({{"label", c.label}, {"first_token", c.first_token}, {"lo", c.lo}, {"hi", c.hi}});
    return {{"kind", vconf::to_string(kind_)}, {"classes", classes}};
}

confidence_lexicon confidence_lexicon::digits(lexicon_kind kind) {
    std::vector<confidence_class> classes;
    for (int d = 0; d < 10; ++d) {
        confidence_class c;
        c.label = std::to_string(d);
        c.first_token = std::to_string(d);
        c.lo = d / 10.0;
        c.hi = (d + 1) / 10.0;
        classes.push_back(std::move(c));
    }
    classes.back().hi = 1.0;
    return confidence_lexicon(kind, std::move(classes));
}

double class_to_confidence(const confidence_lexicon & lexicon, int value) {
    switch (lexicon.kind()) {
    case lexicon_kind::categorical: {
        if (value < 0) throw error(error_kind::validation, "negative class index");
        const auto & c = lexicon.at(static_cast<std::size_t>(value));
        return (c.lo + c.hi) / 2.0;
    }
    case lexicon_kind::numeric0_9:
        if (value < 0 || value > 9) throw error(error_kind::validation, "value outside 0..9");
        return value / 9.0;
    case lexicon_kind::numeric0_100:
        if (value < 0 || value > 100) throw error(error_kind::validation, "value outside 0..100");
        return value / 100.0;
    }
    return 0.0;
}

double logit_difference(const logit_row & row) {
    const std::size_t k = row.logits.size();
    if (k < 2) throw error(error_kind::validation, "logit difference needs at least two classes");
    if (row.target_class >= k) throw error(error_kind::validation, "target class out of range");
    double others = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        if (i != row.target_class) others += row.logits[i];
    return row.logits[row.target_class] - others / static_cast<double>(k - 1);
}

logit_row class_logits(const confidence_lexicon & lexicon, std::span<const double> vocab_logits,
                       std::size_t target_class) {
    logit_row row;
    row.target_class = target_class;
    for (const auto & c : lexicon.classes()) {
        if (c.first_token_id >= vocab_logits.size()) throw error(error_kind::validation, "class token outside vocabulary");
        row.logits.push_back(vocab_logits[c.first_token_id]);
    }
    return row;
}

void check_equal_lengths(std::size_t a, std::size_t b) {
    if (a != b) throw error(error_kind::validation, "sequence lengths differ (" + std::to_string(a) + " vs " +
                                                        std::to_string(b) + ")");
    if (a == 0) throw error(error_kind::validation, "empty sequences");
}

double recovery(double clean, double corrupt, double patched) {
    if (clean == corrupt) throw error(error_kind::undefined_denominator, "clean and corrupt metrics are equal");
    return (patched - corrupt) / (clean - corrupt) * 100.0;
}

double recovery_token(double rate_corrupt, double rate_patched) {
    if (rate_corrupt == 0.0) throw error(error_kind::undefined_denominator, "corrupt change rate is zero");
    return (rate_corrupt - rate_patched) / rate_corrupt * 100.0;
}

namespace {

std::size_t ece_bin(double c, std::size_t n_bins) {
    const double n = static_cast<double>(n_bins);
    auto edge = [&](std::size_t b) { return static_cast<double>(b) / n; };
    std::size_t b = c <= 0.0 ? 0 : std::min(static_cast<std::size_t>(std::floor(c * n)), n_bins - 1);
    while (b > 0 && c < edge(b)) --b;
    while (b + 1 < n_bins && c >= edge(b + 1)) ++b;
    return b;
}

} // namespace

double ece(std::span<const double> confidences, const std::vector<bool> & correct, std::size_t n_bins) {
    check_equal_lengths(confidences.size(), correct.size());
    if (n_bins < 1) throw error(error_kind::validation, "n_bins must be at least 1");
    std::vector<double> conf_sum(n_bins, 0.0);
    std::vector<double> acc_sum(n_bins, 0.0);
    std::vector<std::size_t> count(n_bins, 0);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const double c = confidences[i];
        if (!(c >= 0.0 && c <= 1.0)) throw error(error_kind::validation, "confidence outside [0, 1]");
        const std::size_t b = ece_bin(c, n_bins);
        conf_sum[b] += c;
        acc_sum[b] += correct[i] ? 1.0 : 0.0;
        ++count[b];
    }
    const double n = static_cast<double>(confidences.size());
    double total = 0.0;
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (count[b] == 0) continue;
        const double m = static_cast<double>(count[b]);
        total += (m / n) * std::abs(acc_sum[b] / m - conf_sum[b] / m);
    }
    return total;
}

double auroc(std::span<const double> scores, const std::vector<bool> & labels) {
    check_equal_lengths(scores.size(), labels.size());
    // rank-sum form with midranks for ties
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) {
                pos_rank_sum += midrank;
                ++n_pos;
            }
        }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw error(error_kind::degenerate_labels, "AUROC needs both label values");
    const double np = static_cast<double>(n_pos);
    const double nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

std::optional<int> parse_leading_int(const std::string & s) {
    std::size_t i = 0;
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t start = i;
    int value = 0;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9' && i - start < 9) value = value * 10 + (s[i++] - '0');
    if (i == start) return std::nullopt;
    return value;
}

char first_non_space(const std::string & s) {
    for (char c : s)
        if (c != ' ') return c;
    return '\0';
}

} // namespace

digit_outcome digit_metrics(const std::string & baseline_digits, const std::string & intervened_digits,
                            const logit_row & digit_logits, double scale) {
    digit_outcome out;
    out.digit_logit_difference = logit_difference(digit_logits);
    const auto base = parse_leading_int(baseline_digits);
    const auto inter = parse_leading_int(intervened_digits);
    if (!base) throw error(error_kind::parse, "baseline \"" + baseline_digits + "\" does not start with a digit");
    if (!inter) {
        out.first_digit_changed = true;
        out.unparseable = true;
        return out;
    }
    out.first_digit_changed = first_non_space(baseline_digits) != first_non_space(intervened_digits);
    out.confidence_change = (*inter - *base) / scale;
    return out;
}

// ---------------------------------------------------------------------------

mean_se summarize(std::span<const double> values) {
    mean_se out;
    out.n = values.size();
    if (values.empty()) return out;
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) return out;
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    out.se = sd / std::sqrt(static_cast<double>(values.size()));
    return out;
}

double metrics_report::change_rate() const {
    if (trials.empty()) return 0.0;
    std::size_t changed = 0;
    for (const auto & t : trials) changed += t.token_changed ? 1 : 0;
    return static_cast<double>(changed) / static_cast<double>(trials.size());
}

mean_se metrics_report::logit_diff_change() const {
    std::vector<double> v;
    for (const auto & t : trials) v.push_back(t.logit_diff_change);
    return summarize(v);
}

mean_se metrics_report::confidence_change() const {
    std::vector<double> v;
    for (const auto & t : trials)
        if (t.confidence_change) v.push_back(*t.confidence_change);
    return summarize(v);
}

std::size_t metrics_report::unparseable() const {
    std::size_t n = 0;
    for (const auto & t : trials) n += t.confidence_change ? 0 : 1;
    return n;
}

bool metrics_report::valid() const {
    const std::size_t attempted = trials.size() + aborted;
    return attempted == 0 || static_cast<double>(aborted) <= 0.01 * static_cast<double>(attempted);
}

std::string format_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

const std::vector<std::string> & trial_csv_columns() {
    static const std::vector<std::string> cols{
        "experiment",       "condition",         "layer",         "position",
        "trial_id",         "logit_diff_change", "confidence_change", "token_changed",
        "clean_confidence", "intervened_confidence"};
    return cols;
}

void write_trial_csv_header(std::ostream & out) {
    const auto & cols = trial_csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
}

void write_trial_csv_rows(std::ostream & out, const metrics_report & r) {
    for (const auto & t : r.trials) {
        out << r.experiment << ',' << r.condition << ',' << r.layer << ',' << r.position << ',' << t.trial_id << ','
            << format_real(t.logit_diff_change) << ',' << (t.confidence_change ? format_real(*t.confidence_change) : "")
            << ',' << (t.token_changed ? 1 : 0) << ',' << format_real(t.clean_confidence) << ','
            << (t.intervened_confidence ? format_real(*t.intervened_confidence) : "") << '\n';
    }
}

json aggregate_json(const metrics_report & r) {
    const auto ld = r.logit_diff_change();
    const auto cc = r.confidence_change();
    json j{{"experiment", r.experiment},
           {"condition", r.condition},
           {"layer", r.layer},
           {"position", r.position},
           {"n_trials", r.trials.size()},
           {"aborted", r.aborted},
           {"valid", r.valid()},
           {"change_rate", r.change_rate()},
           {"logit_diff_change_mean", ld.mean},
           {"logit_diff_change_se", ld.se},
           {"confidence_change_mean", cc.mean},
           {"confidence_change_se", cc.se},
           {"unparseable", r.unparseable()}};
    for (const auto & [k, v] : r.extras) j[k] = v;
    return j;
}

namespace {

std::vector<std::string> split_csv_line(const std::string & line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_real(const std::string & s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw error(error_kind::parse, "bad number \"" + s + "\" in CSV");
    return v;
}

} // namespace

std::vector<metrics_report> read_trial_csv(std::istream & in) {
    std::string line;
    if (!std::getline(in, line)) return {};
    if (split_csv_line(line) != trial_csv_columns()) throw error(error_kind::parse, "unexpected CSV header");
    std::vector<metrics_report> reports;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != trial_csv_columns().size())
            throw error(error_kind::parse, "CSV line " + std::to_string(line_no) + " has wrong field count");
        const std::size_t layer = static_cast<std::size_t>(parse_real(f[2]));
        if (reports.empty() || reports.back().experiment != f[0] || reports.back().condition != f[1] ||
            reports.back().layer != layer || reports.back().position != f[3]) {
            metrics_report r;
            r.experiment = f[0];
            r.condition = f[1];
            r.layer = layer;
            r.position = f[3];
            reports.push_back(std::move(r));
        }
        trial_metrics t;
        t.trial_id = f[4];
        t.logit_diff_change = parse_real(f[5]);
        if (!f[6].empty()) t.confidence_change = parse_real(f[6]);
        t.token_changed = f[7] == "1";
        t.clean_confidence = parse_real(f[8]);
        if (!f[9].empty()) t.intervened_confidence = parse_real(f[9]);
        reports.back().trials.push_back(std::move(t));
    }
    return reports;
}

} // namespace vconf
