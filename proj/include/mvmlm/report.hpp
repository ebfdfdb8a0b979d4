#pragma once

#include "mvmlm/eb.hpp"
#include "mvmlm/fit.hpp"
#include "mvmlm/mi.hpp"

#include <string>
#include <vector>

namespace mvmlm {

/// Fixed-point with `decimals` digits after the point; "NA" for non-finite.
std::string fixed(double v, int decimals = 4);

/// Lower-triangular within / between / total correlations and the percentage
/// of each (co)variance lying between classes.
std::string decomposition_table(const DecompositionReport& r);

/// Coefficient and robust (or model) SE per outcome, one row per term, with
/// the equality-test p-value in the last column, then the covariance
/// parameters.
std::string coefficient_table(const MIFitResult& mi, const std::vector<EqualityTest>& tests);
std::string coefficient_csv(const MIFitResult& mi, const std::vector<EqualityTest>& tests);

std::string territorial_table(const std::vector<AreaSummary>& rows, const std::string& outcome);
std::string territorial_csv(const std::vector<AreaSummary>& rows);

std::string caterpillar_csv(const std::vector<CaterpillarRow>& rows);
std::string qq_csv(const std::vector<QQRow>& rows);

/// Self-contained SVG documents.
std::string caterpillar_svg(const std::vector<CaterpillarRow>& rows, const std::string& title);
std::string qq_svg(const std::vector<QQRow>& rows, const std::string& title);

}  // namespace mvmlm
