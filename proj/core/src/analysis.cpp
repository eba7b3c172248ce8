// SPDX-License-Identifier: Apache-2.0

#include "flowlens/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace flowlens {

RttSeries RttSeries::from_unsorted(std::string key, std::vector<std::int64_t> values) {
    std::sort(values.begin(), values.end());
    return {std::move(key), std::move(values)};
}

double median(const RttSeries& series) {
    const auto& v = series.values;
    if (v.empty()) throw EmptySeries();
    const std::size_t n = v.size();
    if (n % 2 == 1) return static_cast<double>(v[n / 2]);
    return (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2])) / 2.0;
}

CdfCurve cdf(const RttSeries& series) {
    const auto& v = series.values;
    if (v.empty()) throw EmptySeries();
    CdfCurve out;
    const double n = static_cast<double>(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i + 1 < v.size() && v[i + 1] == v[i]) continue;
        out.push_back({v[i], static_cast<double>(i + 1) / n});
    }
    out.back().fraction = 1.0;
    return out;
}

std::int64_t value_at_fraction(const CdfCurve& curve, double fraction) {
    if (curve.empty()) throw EmptySeries();
    // Tolerate the rounding in (i+1)/n.
    constexpr double kEps = 1e-12;
    for (const auto& p : curve) {
        if (p.fraction + kEps >= fraction) return p.rtt_us;
    }
    return curve.back().rtt_us;
}

double round_half_ms(double us) { return std::round(us / 1000.0 * 2.0) / 2.0; }

std::string group_key_of(const MeasurementRecord& rec, GroupKey key) {
    switch (key) {
    case GroupKey::App: return rec.app.name;
    case GroupKey::NetworkType: return to_string(rec.network_type);
    case GroupKey::NetworkLabel: return rec.network_label;
    case GroupKey::NetworkTypeAndLabel: return std::string(to_string(rec.network_type)) + "/" + rec.network_label;
    case GroupKey::Domain: return rec.domain;
    }
    return {};
}

std::vector<RttSeries> group_series(std::span<const MeasurementRecord> records, GroupKey key,
                                    const RecordFilter& filter) {
    std::map<std::string, std::vector<std::int64_t>> groups;
    for (const auto& r : records) {
        if (r.outcome != Outcome::Success || !r.rtt_us) continue;
        if (filter && !filter(r)) continue;
        groups[group_key_of(r, key)].push_back(*r.rtt_us);
    }
    std::vector<RttSeries> out;
    out.reserve(groups.size());
    for (auto& [k, v] : groups) out.push_back(RttSeries::from_unsorted(k, std::move(v)));
    return out;
}

std::vector<SummaryRow> group_summary(std::span<const MeasurementRecord> records, GroupKey key,
                                      std::size_t min_count, const RecordFilter& filter) {
    std::vector<SummaryRow> rows;
    for (const auto& s : group_series(records, key, filter)) {
        if (s.values.size() < min_count) continue;
        const double m = median(s);
        rows.push_back({s.key, s.values.size(), m, round_half_ms(m)});
    }
    std::sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
        if (a.count != b.count) return a.count > b.count;
        return a.key < b.key;
    });
    return rows;
}

std::vector<std::uint64_t> bucket_histogram(std::span<const double> latencies_ms, std::span<const double> edges_ms) {
    std::vector<std::uint64_t> counts(edges_ms.size() + 1, 0);
    for (double x : latencies_ms) {
        const auto it = std::upper_bound(edges_ms.begin(), edges_ms.end(), x);
        ++counts[static_cast<std::size_t>(it - edges_ms.begin())];
    }
    return counts;
}

namespace {

std::string fmt_num(double v) {
    std::ostringstream os;
    os.precision(15);
    os << v;
    return os.str();
}

} // namespace

std::vector<std::string> histogram_labels(std::span<const double> edges_ms) {
    std::vector<std::string> out;
    double lo = 0;
    for (double e : edges_ms) {
        out.push_back(fmt_num(lo) + "-" + fmt_num(e) + "ms");
        lo = e;
    }
    out.push_back(">" + fmt_num(lo) + "ms");
    return out;
}

std::string format_summary_tsv(const std::vector<SummaryRow>& rows, const std::string& key_header) {
    std::ostringstream os;
    os << key_header << "\tcount\tmedian_ms\tmedian_us\n";
    for (const auto& r : rows) {
        os << r.key << '\t' << r.count << '\t' << fmt_num(r.median_ms_display) << '\t' << fmt_num(r.median_us)
           << '\n';
    }
    return os.str();
}

std::string format_cdf(const CdfCurve& curve) {
    std::ostringstream os;
    os.precision(10);
    for (const auto& p : curve) os << p.rtt_us << '\t' << p.fraction << '\n';
    return os.str();
}

} // namespace flowlens
