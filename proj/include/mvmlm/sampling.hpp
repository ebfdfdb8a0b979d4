#pragma once

#include "mvmlm/simulate.hpp"
#include "mvmlm/weighted.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mvmlm {

struct PpsSelection {
    std::vector<std::size_t> selected;  // indices into the size vector, in list order
    std::vector<double> pi;             // inclusion probability of every unit
    std::vector<bool> certainty;
};

/// Systematic PPS selection of n units along the list order. Units whose size
/// exceeds the interval are taken with certainty and the interval is
/// recomputed over the rest. `start_fraction` in [0, 1) places the random
/// start at start_fraction * I.
PpsSelection pps_systematic(const std::vector<double>& sizes, int n, double start_fraction);

struct SchoolSample {
    std::vector<std::size_t> schools;  // indices into pop.schools
    std::map<std::string, double> weight;  // w_k = 1 / pi_k by school id
    std::map<std::string, double> pi;
};

/// Within each explicit stratum, schools are sorted by (school type,
/// province, id) and selected by pps_systematic on their measures of size.
SchoolSample sample_pps_systematic(const FramePopulation& pop, const std::map<std::string, int>& per_stratum,
                                   std::uint64_t seed);

struct ClassSample {
    std::vector<std::vector<std::size_t>> units;  // pseudo-classes (indices into the input)
    std::vector<std::size_t> drawn_units;
    std::vector<std::size_t> selected;  // input indices of the sampled classes
    double weight = 1.0;                // w_{j|k} shared by every sampled class
};

/// Classes smaller than `threshold` are merged (smallest first) into
/// pseudo-classes of at least `threshold` students; then `n_draw` units are
/// drawn with equal probability. w_{j|k} = units / drawn.
ClassSample sample_classes(const std::vector<std::string>& class_ids, const std::vector<int>& sizes, int n_draw,
                           int threshold, std::uint64_t seed);

struct SampleDesign {
    std::map<std::string, int> schools_per_stratum;  // overrides the default
    int default_schools = 10;
    int classes_per_school = 1;
    int pseudo_class_threshold = 15;
};

struct SampleResult {
    std::vector<std::string> class_ids;
    WeightSet weights;  // w_{i|jk} = 1: every student of a sampled class takes part
};

/// Two-stage sample: PPS schools, then classes within schools.
SampleResult draw_sample(const FramePopulation& pop, const SampleDesign& design, std::uint64_t seed);

/// Which unit belongs where; adjustment cells are the stratum for schools,
/// the school for classes and the class for students.
struct SampleStructure {
    std::map<std::string, std::string> school_stratum;
    std::map<std::string, std::string> class_school;
    std::map<std::string, std::string> student_class;
};

SampleStructure sample_structure(const FramePopulation& pop, const std::vector<std::string>& class_ids);

/// Response indicators; units not listed responded.
struct ResponseIndicators {
    std::map<std::string, bool> school;
    std::map<std::string, bool> class_;
    std::map<std::string, bool> student;
};

/// Respondent weights multiplied by (sum of sampled weights) / (sum of
/// respondent weights) within each cell; nonrespondents are removed.
WeightSet nonresponse_adjust(const WeightSet& w, const SampleStructure& s, const ResponseIndicators& r);

}  // namespace mvmlm
