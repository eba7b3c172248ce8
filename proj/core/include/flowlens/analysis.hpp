// SPDX-License-Identifier: Apache-2.0
//
// Offline statistics over measurement records: medians, empirical CDFs,
// grouped summaries and the latency histogram used by the benchmarks.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowlens/measure.hpp"

namespace flowlens {

class EmptySeries : public std::invalid_argument {
public:
    EmptySeries() : std::invalid_argument("empty series") {}
};

struct RttSeries {
    std::string key;
    std::vector<std::int64_t> values; // ascending

    static RttSeries from_unsorted(std::string key, std::vector<std::int64_t> values);
};

// Mean of the two middle values for even counts.
double median(const RttSeries& series);

struct CdfPoint {
    std::int64_t rtt_us = 0;
    double fraction = 0.0;
    bool operator==(const CdfPoint&) const = default;
};
using CdfCurve = std::vector<CdfPoint>;

// One point per distinct value, carrying the fraction of samples at or below
// it; equal values collapse into a single step.
CdfCurve cdf(const RttSeries& series);

// Smallest value whose cumulative fraction reaches `fraction`.
std::int64_t value_at_fraction(const CdfCurve& curve, double fraction);

double round_half_ms(double us);

enum class GroupKey { App, NetworkType, NetworkLabel, NetworkTypeAndLabel, Domain };

std::string group_key_of(const MeasurementRecord& rec, GroupKey key);

struct SummaryRow {
    std::string key;
    std::size_t count = 0;
    double median_us = 0.0;
    double median_ms_display = 0.0;
    bool operator==(const SummaryRow&) const = default;
};

using RecordFilter = std::function<bool(const MeasurementRecord&)>;

// Successful records only; groups below `min_count` are dropped. Rows are
// ordered by count descending, then key ascending.
std::vector<SummaryRow> group_summary(std::span<const MeasurementRecord> records, GroupKey key,
                                      std::size_t min_count, const RecordFilter& filter = {});

std::vector<RttSeries> group_series(std::span<const MeasurementRecord> records, GroupKey key,
                                    const RecordFilter& filter = {});

inline const std::vector<double> kDefaultHistogramEdgesMs{1, 2, 5, 10};

// Buckets [0,e0), [e0,e1), ..., [e_last, inf).
std::vector<std::uint64_t> bucket_histogram(std::span<const double> latencies_ms,
                                            std::span<const double> edges_ms = kDefaultHistogramEdgesMs);

std::vector<std::string> histogram_labels(std::span<const double> edges_ms = kDefaultHistogramEdgesMs);

// Tab-separated renderings.
std::string format_summary_tsv(const std::vector<SummaryRow>& rows, const std::string& key_header);
std::string format_cdf(const CdfCurve& curve);

} // namespace flowlens
