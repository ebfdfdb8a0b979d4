#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvmlm {

/// Base class for every domain error raised by the library. The CLI maps
/// these to exit code 1 and a JSON error record on stderr.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("parse", "line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Broken nesting or a higher-level covariate that varies within its unit.
class StructuralError : public Error {
public:
    StructuralError(std::string unit, const std::string& what)
        : Error("structural", what), unit_(std::move(unit)) {}
    const std::string& unit() const noexcept { return unit_; }

private:
    std::string unit_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

class EmptyAnalysisError : public Error {
public:
    explicit EmptyAnalysisError(const std::string& what) : Error("empty-analysis", what) {}
};

class NumericalError : public Error {
public:
    NumericalError(const std::string& what, double condition)
        : Error("numerical", what), condition_(condition) {}
    double condition() const noexcept { return condition_; }

private:
    double condition_;
};

class RankDeficiencyError : public Error {
public:
    RankDeficiencyError(std::vector<std::string> columns, const std::string& what)
        : Error("rank-deficiency", what), columns_(std::move(columns)) {}
    const std::vector<std::string>& columns() const noexcept { return columns_; }

private:
    std::vector<std::string> columns_;
};

}  // namespace mvmlm
