#include "mvmlm/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace mvmlm {

std::string fixed(double v, int decimals) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s.rfind("-0.", 0) == 0 && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

namespace {

std::string pad_left(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }
std::string pad_right(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::vector<std::string> term_order(const CoefficientLayout& layout) {
    std::vector<std::string> terms;
    for (const auto& c : layout.coefficients) {
        if (std::find(terms.begin(), terms.end(), c.term) == terms.end()) terms.push_back(c.term);
    }
    return terms;
}

struct Axis {
    double lo = 0.0, hi = 1.0;
    double px0 = 0.0, px1 = 1.0;
    double map(double v) const { return px0 + (v - lo) / (hi - lo) * (px1 - px0); }
};

Axis padded_axis(double lo, double hi, double px0, double px1) {
    if (!(hi > lo)) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    return {lo - pad, hi + pad, px0, px1};
}

std::vector<double> ticks(double lo, double hi) {
    const double span = hi - lo;
    const double raw = span / 6.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double f : {1.0, 2.0, 5.0, 10.0}) {
        if (f * mag >= raw) {
            step = f * mag;
            break;
        }
    }
    std::vector<double> t;
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::abs(v) < 1e-12 ? 0.0 : v);
    return t;
}

std::string short_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

constexpr int kWidth = 900, kHeight = 480;
constexpr int kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;

void svg_frame(std::ostringstream& o, const std::string& title, const Axis& x, const Axis& y, const std::string& xlab,
               const std::string& ylab, bool x_ticks) {
    o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << svg_escape(title)
      << "</text>\n";
    o << "<g stroke=\"#444\" stroke-width=\"1\">\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
      << kHeight - kBottom << "\"/>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom << "\"/>\n"
      << "</g>\n";
    for (double t : ticks(y.lo, y.hi)) {
        const double py = y.map(t);
        o << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << py << "\" x2=\"" << kLeft << "\" y2=\"" << py
          << "\" stroke=\"#444\"/><text x=\"" << kLeft - 6 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">"
          << short_num(t) << "</text>\n";
    }
    if (x_ticks) {
        for (double t : ticks(x.lo, x.hi)) {
            const double px = x.map(t);
            o << "<line x1=\"" << px << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << px << "\" y2=\""
              << kHeight - kBottom + 4 << "\" stroke=\"#444\"/><text x=\"" << px << "\" y=\"" << kHeight - kBottom + 18
              << "\" text-anchor=\"middle\">" << short_num(t) << "</text>\n";
        }
    }
    o << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
      << svg_escape(xlab) << "</text>\n"
      << "<text x=\"18\" y=\"" << (kTop + kHeight - kBottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << (kTop + kHeight - kBottom) / 2 << ")\">" << svg_escape(ylab) << "</text>\n";
}

}  // namespace

std::string decomposition_table(const DecompositionReport& r) {
    const auto M = r.outcomes.size();
    std::ostringstream o;
    const std::size_t w0 = 10, w = 8;
    auto block_header = [&](const char* name) {
        std::string h = name;
        return pad_right(h, w * M);
    };
    o << pad_right("", w0) << " | " << block_header("Within-class correlation") << " | "
      << block_header("Between-class correlation") << " | " << block_header("Total correlation") << " | "
      << "% between-class (co)variance\n";
    auto names = [&] {
        std::string s;
        for (const auto& n : r.outcomes) s += pad_left(n, w);
        return s;
    };
    o << pad_right("", w0) << " | " << names() << " | " << names() << " | " << names() << " | " << names() << '\n';
    o << std::string(w0 + 4 * (3 + w * M), '-') << '\n';
    for (std::size_t i = 0; i < M; ++i) {
        o << pad_right(r.outcomes[i], w0);
        const Eigen::MatrixXd* blocks[] = {&r.within_corr, &r.between_corr, &r.total_corr, &r.pct_between};
        for (int b = 0; b < 4; ++b) {
            o << " | ";
            for (std::size_t j = 0; j < M; ++j) {
                const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
                o << pad_left(j <= i ? fixed((*blocks[b])(ii, jj), b == 3 ? 1 : 4) : "", w);
            }
        }
        o << '\n';
    }
    o << "ICC (%):";
    for (std::size_t i = 0; i < M; ++i) o << ' ' << r.outcomes[i] << '=' << fixed(r.icc(static_cast<Eigen::Index>(i)), 1);
    o << '\n';
    return o.str();
}

std::string coefficient_table(const MIFitResult& mi, const std::vector<EqualityTest>& tests) {
    const auto& L = mi.layout;
    const auto M = L.outcomes.size();
    std::map<std::string, double> pvals;
    for (const auto& t : tests) pvals[t.term] = t.p_value;
    std::ostringstream o;
    const std::size_t w0 = 28, w = 11;
    o << pad_right("", w0);
    for (const auto& n : L.outcomes) o << pad_left(n + " coef", w) << pad_left("s.e.", w);
    o << pad_left("F p-value", w) << '\n';
    o << std::string(w0 + w * (2 * M + 1), '-') << '\n';
    o << "Regression coefficients (score points)\n";
    for (const auto& term : term_order(L)) {
        o << pad_right("  " + term, w0);
        for (std::size_t m = 0; m < M; ++m) {
            int i = L.index_of(term, static_cast<int>(m));
            if (i < 0 && L.is_common(term)) i = L.index_of(term, -1);
            if (i < 0) {
                o << pad_left("", w) << pad_left("", w);
            } else {
                const auto& c = mi.coefficients[static_cast<std::size_t>(i)];
                o << pad_left(fixed(c.estimate), w) << pad_left(fixed(c.se()), w);
            }
        }
        auto p = pvals.find(term);
        o << pad_left(p == pvals.end() ? "" : fixed(p->second), w) << '\n';
    }
    o << "Covariance parameters (points^2)\n";
    for (const auto& v : mi.varcomps) {
        o << pad_right("  " + v.name, w0) << pad_left(fixed(v.estimate), w) << pad_left(fixed(v.se()), w) << '\n';
    }
    o << "Standard errors: " << to_string(mi.covariance) << ", MI-combined over " << mi.m() << " plausible values.\n";
    o << "F p-value: D1 test for the equality of the coefficient across outcomes.\n";
    for (const auto& w : mi.warnings) o << "warning: " << w << '\n';
    return o.str();
}

std::string coefficient_csv(const MIFitResult& mi, const std::vector<EqualityTest>& tests) {
    std::map<std::string, const EqualityTest*> by_term;
    for (const auto& t : tests) by_term[t.term] = &t;
    std::ostringstream o;
    o << "name,term,outcome,estimate[points],se[points],within[points^2],between[points^2],df,equality_D1,equality_p\n";
    for (std::size_t i = 0; i < mi.coefficients.size(); ++i) {
        const auto& c = mi.coefficients[i];
        const auto& meta = mi.layout.coefficients[i];
        const std::string outcome = meta.outcome < 0 ? "(all)" : mi.layout.outcomes[static_cast<std::size_t>(meta.outcome)];
        auto t = by_term.find(meta.term);
        o << csv_field(c.name) << ',' << csv_field(meta.term) << ',' << csv_field(outcome) << ',' << format_double(c.estimate)
          << ',' << format_double(c.se()) << ',' << format_double(c.within) << ',' << format_double(c.between) << ','
          << format_double(c.df) << ',' << (t == by_term.end() ? "" : format_double(t->second->statistic)) << ','
          << (t == by_term.end() ? "" : format_double(t->second->p_value)) << '\n';
    }
    return o.str();
}

std::string territorial_table(const std::vector<AreaSummary>& rows, const std::string& outcome) {
    std::ostringstream o;
    o << "Proportions of good and poor classes (" << outcome << ")\n";
    o << pad_right("Area", 20) << pad_left("Classes", 9) << pad_left("good", 10) << pad_left("poor", 10) << '\n';
    o << std::string(49, '-') << '\n';
    for (const auto& r : rows) {
        if (r.area == "overall") o << std::string(49, '-') << '\n';
        o << pad_right(r.area, 20) << pad_left(std::to_string(r.n_classes), 9) << pad_left(fixed(r.prop_good), 10)
          << pad_left(fixed(r.prop_poor), 10) << '\n';
    }
    return o.str();
}

std::string territorial_csv(const std::vector<AreaSummary>& rows) {
    std::ostringstream o;
    o << "area,classes,good,poor,prop_good,prop_poor\n";
    for (const auto& r : rows) {
        o << csv_field(r.area) << ',' << r.n_classes << ',' << r.n_good << ',' << r.n_poor << ','
          << format_double(r.prop_good) << ',' << format_double(r.prop_poor) << '\n';
    }
    return o.str();
}

std::string caterpillar_csv(const std::vector<CaterpillarRow>& rows) {
    std::ostringstream o;
    o << "rank,class_id,u_hat[points],lower[points],upper[points],label\n";
    for (const auto& r : rows) {
        o << r.rank << ',' << csv_field(r.class_id) << ',' << format_double(r.u_hat) << ',' << format_double(r.lower)
          << ',' << format_double(r.upper) << ',' << to_string(r.label) << '\n';
    }
    return o.str();
}

std::string qq_csv(const std::vector<QQRow>& rows) {
    std::ostringstream o;
    o << "rank,class_id,theoretical[z],standardized[z],outlier\n";
    for (const auto& r : rows) {
        o << r.rank << ',' << csv_field(r.class_id) << ',' << format_double(r.theoretical) << ','
          << format_double(r.standardized) << ',' << (r.outlier ? 1 : 0) << '\n';
    }
    return o.str();
}

std::string caterpillar_svg(const std::vector<CaterpillarRow>& rows, const std::string& title) {
    double lo = 0.0, hi = 0.0;
    for (const auto& r : rows) {
        lo = std::min(lo, r.lower);
        hi = std::max(hi, r.upper);
    }
    const Axis y = padded_axis(lo, hi, kHeight - kBottom, kTop);
    const Axis x{0.5, static_cast<double>(rows.size()) + 0.5, static_cast<double>(kLeft + 5),
                 static_cast<double>(kWidth - kRight - 5)};
    std::ostringstream o;
    svg_frame(o, title, x, y, "class rank", "EB residual (score points)", false);
    o << "<line x1=\"" << kLeft << "\" y1=\"" << y.map(0.0) << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << y.map(0.0)
      << "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";
    for (const auto& r : rows) {
        const char* colour = r.label == Label::good ? "#1a7f37" : r.label == Label::poor ? "#c62828" : "#555";
        const double px = x.map(r.rank);
        o << "<g stroke=\"" << colour << "\" fill=\"" << colour << "\"><title>" << svg_escape(r.class_id) << ' '
          << fixed(r.u_hat, 2) << " [" << fixed(r.lower, 2) << ", " << fixed(r.upper, 2) << "]</title>"
          << "<line x1=\"" << px << "\" y1=\"" << y.map(r.lower) << "\" x2=\"" << px << "\" y2=\"" << y.map(r.upper)
          << "\"/><circle cx=\"" << px << "\" cy=\"" << y.map(r.u_hat) << "\" r=\"2\"/></g>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::string qq_svg(const std::vector<QQRow>& rows, const std::string& title) {
    double lo = -3.0, hi = 3.0;
    for (const auto& r : rows) {
        lo = std::min({lo, r.theoretical, r.standardized});
        hi = std::max({hi, r.theoretical, r.standardized});
    }
    const Axis x = padded_axis(lo, hi, kLeft, kWidth - kRight);
    const Axis y = padded_axis(lo, hi, kHeight - kBottom, kTop);
    std::ostringstream o;
    svg_frame(o, title, x, y, "normal quantile", "standardized EB residual", true);
    o << "<line x1=\"" << x.map(x.lo) << "\" y1=\"" << y.map(x.lo) << "\" x2=\"" << x.map(x.hi) << "\" y2=\""
      << y.map(x.hi) << "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";
    for (double band : {-3.0, 3.0}) {
        o << "<line x1=\"" << kLeft << "\" y1=\"" << y.map(band) << "\" x2=\"" << kWidth - kRight << "\" y2=\""
          << y.map(band) << "\" stroke=\"#e0a000\" stroke-dasharray=\"2 3\"/>\n";
    }
    for (const auto& r : rows) {
        o << "<circle cx=\"" << x.map(r.theoretical) << "\" cy=\"" << y.map(r.standardized) << "\" r=\"2.5\" fill=\""
          << (r.outlier ? "#c62828" : "#1f4e9c") << "\"><title>" << svg_escape(r.class_id) << ' '
          << fixed(r.standardized, 3) << "</title></circle>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace mvmlm
