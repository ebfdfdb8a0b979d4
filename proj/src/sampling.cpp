#include "mvmlm/sampling.hpp"

#include "mvmlm/error.hpp"
#include "mvmlm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <tuple>

namespace mvmlm {

PpsSelection pps_systematic(const std::vector<double>& sizes, int n, double start_fraction) {
    const auto N = sizes.size();
    if (n < 0 || static_cast<std::size_t>(n) > N) {
        throw ValidationError("cannot select " + std::to_string(n) + " of " + std::to_string(N) + " units");
    }
    for (double s : sizes) {
        if (!std::isfinite(s) || !(s > 0.0)) throw ValidationError("sizes must be positive");
    }
    if (!(start_fraction >= 0.0 && start_fraction < 1.0)) throw ValidationError("start fraction must lie in [0, 1)");

    PpsSelection sel;
    sel.certainty.assign(N, false);
    sel.pi.assign(N, 0.0);
    int n_rem = n;
    double S = 0.0, I = 0.0;
    while (true) {
        S = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            if (!sel.certainty[i]) S += sizes[i];
        }
        if (n_rem == 0) break;
        I = S / n_rem;
        bool promoted = false;
        for (std::size_t i = 0; i < N; ++i) {
            if (!sel.certainty[i] && sizes[i] > I) {
                sel.certainty[i] = true;
                --n_rem;
                promoted = true;
            }
        }
        if (!promoted) break;
    }
    for (std::size_t i = 0; i < N; ++i) {
        sel.pi[i] = sel.certainty[i] ? 1.0 : (n_rem > 0 ? n_rem * sizes[i] / S : 0.0);
    }

    std::vector<bool> hit(sel.certainty);
    if (n_rem > 0) {
        const double start = start_fraction * I;
        int k = 0;
        double cum = 0.0;
        std::size_t last = N;
        for (std::size_t i = 0; i < N && k < n_rem; ++i) {
            if (sel.certainty[i]) continue;
            last = i;
            const double lo = cum;
            cum += sizes[i];
            const double point = start + k * I;
            if (point >= lo && point < cum) {
                hit[i] = true;
                ++k;
            }
        }
        // Rounding can leave the final point just past the cumulated total.
        if (k < n_rem && last < N && !hit[last]) hit[last] = true;
    }
    for (std::size_t i = 0; i < N; ++i) {
        if (hit[i]) sel.selected.push_back(i);
    }
    return sel;
}

SchoolSample sample_pps_systematic(const FramePopulation& pop, const std::map<std::string, int>& per_stratum,
                                   std::uint64_t seed) {
    std::map<std::string, std::vector<std::size_t>> strata;
    for (std::size_t k = 0; k < pop.schools.size(); ++k) strata[pop.schools[k].stratum].push_back(k);
    SchoolSample out;
    for (auto& [name, members] : strata) {
        auto it = per_stratum.find(name);
        if (it == per_stratum.end()) throw ValidationError("no school count given for stratum '" + name + "'");
        std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            const auto& sa = pop.schools[a];
            const auto& sb = pop.schools[b];
            return std::tie(sa.school_type, sa.province, sa.id) < std::tie(sb.school_type, sb.province, sb.id);
        });
        std::vector<double> sizes;
        for (auto k : members) sizes.push_back(pop.schools[k].mos);
        auto rng = Rng::stream(seed, "pps", name);
        const auto sel = pps_systematic(sizes, it->second, rng.uniform());
        for (auto i : sel.selected) {
            const auto& s = pop.schools[members[i]];
            out.schools.push_back(members[i]);
            out.pi[s.id] = sel.pi[i];
            out.weight[s.id] = 1.0 / sel.pi[i];
        }
    }
    std::sort(out.schools.begin(), out.schools.end());
    return out;
}

ClassSample sample_classes(const std::vector<std::string>& class_ids, const std::vector<int>& sizes, int n_draw,
                           int threshold, std::uint64_t seed) {
    if (class_ids.size() != sizes.size()) throw ValidationError("class ids and sizes differ in length");
    if (class_ids.empty()) throw ValidationError("school has no classes");
    if (n_draw < 1) throw ValidationError("must draw at least one class");
    ClassSample cs;
    std::vector<std::size_t> small;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] >= threshold) {
            cs.units.push_back({i});
        } else {
            small.push_back(i);
        }
    }
    std::sort(small.begin(), small.end(), [&](std::size_t a, std::size_t b) {
        return std::tie(sizes[a], class_ids[a]) < std::tie(sizes[b], class_ids[b]);
    });
    std::vector<std::vector<std::size_t>> merged;
    std::vector<std::size_t> current;
    int current_size = 0;
    for (auto i : small) {
        current.push_back(i);
        current_size += sizes[i];
        if (current_size >= threshold) {
            merged.push_back(std::move(current));
            current.clear();
            current_size = 0;
        }
    }
    if (!current.empty()) {
        if (merged.empty()) {
            merged.push_back(std::move(current));
        } else {
            merged.back().insert(merged.back().end(), current.begin(), current.end());
        }
    }
    for (auto& g : merged) cs.units.push_back(std::move(g));

    const auto G = cs.units.size();
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(n_draw), G);
    std::vector<std::size_t> order(G);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(G - i) - 1));
        std::swap(order[i], order[j]);
    }
    cs.drawn_units.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(cs.drawn_units.begin(), cs.drawn_units.end());
    for (auto u : cs.drawn_units) cs.selected.insert(cs.selected.end(), cs.units[u].begin(), cs.units[u].end());
    std::sort(cs.selected.begin(), cs.selected.end());
    cs.weight = static_cast<double>(G) / static_cast<double>(take);
    return cs;
}

SampleResult draw_sample(const FramePopulation& pop, const SampleDesign& design, std::uint64_t seed) {
    std::map<std::string, int> counts;
    for (const auto& s : pop.schools) {
        auto it = design.schools_per_stratum.find(s.stratum);
        counts[s.stratum] = it != design.schools_per_stratum.end() ? it->second : design.default_schools;
    }
    const auto schools = sample_pps_systematic(pop, counts, seed);
    SampleResult out;
    for (auto k : schools.schools) {
        const auto& s = pop.schools[k];
        std::vector<std::string> ids;
        std::vector<int> sizes;
        for (auto c : s.classes) {
            ids.push_back(pop.classes[c].id);
            sizes.push_back(pop.classes[c].size);
        }
        const auto cs = sample_classes(ids, sizes, design.classes_per_school, design.pseudo_class_threshold,
                                       splitmix64(seed ^ fnv1a(s.id)));
        out.weights.school[s.id] = schools.weight.at(s.id);
        for (auto i : cs.selected) {
            const auto& fc = pop.classes[s.classes[i]];
            out.class_ids.push_back(fc.id);
            out.weights.class_[fc.id] = cs.weight;
        }
    }
    std::sort(out.class_ids.begin(), out.class_ids.end());
    const std::set<std::string> chosen(out.class_ids.begin(), out.class_ids.end());
    for (std::size_t i = 0; i < pop.truth.n_students(); ++i) {
        if (chosen.count(pop.truth.class_ids[i])) out.weights.student[pop.truth.student_ids[i]] = 1.0;
    }
    return out;
}

SampleStructure sample_structure(const FramePopulation& pop, const std::vector<std::string>& class_ids) {
    const std::set<std::string> keep(class_ids.begin(), class_ids.end());
    SampleStructure s;
    for (const auto& fc : pop.classes) {
        if (!keep.count(fc.id)) continue;
        const auto& sc = pop.schools[fc.school];
        s.class_school[fc.id] = sc.id;
        s.school_stratum[sc.id] = sc.stratum;
    }
    for (std::size_t i = 0; i < pop.truth.n_students(); ++i) {
        if (keep.count(pop.truth.class_ids[i])) s.student_class[pop.truth.student_ids[i]] = pop.truth.class_ids[i];
    }
    return s;
}

namespace {

bool responded(const std::map<std::string, bool>& r, const std::string& id) {
    auto it = r.find(id);
    return it == r.end() || it->second;
}

/// Adjusts `weights` (unit -> weight) within the cells given by `cell_of`,
/// keeping only respondents among `units`.
std::unordered_map<std::string, double> adjust_level(const std::unordered_map<std::string, double>& weights,
                                                     const std::vector<std::string>& units,
                                                     const std::map<std::string, std::string>& cell_of,
                                                     const std::map<std::string, bool>& response, const char* level,
                                                     const char* cell_kind) {
    std::map<std::string, std::pair<double, double>> sums;  // cell -> (sampled, respondents)
    for (const auto& u : units) {
        auto w = weights.find(u);
        if (w == weights.end()) throw ValidationError(std::string("no ") + level + " weight for '" + u + "'");
        auto& s = sums[cell_of.at(u)];
        s.first += w->second;
        if (responded(response, u)) s.second += w->second;
    }
    for (const auto& [cell, s] : sums) {
        if (!(s.second > 0.0)) {
            throw ValidationError(std::string("no responding ") + level + " in " + cell_kind + " '" + cell + "'");
        }
    }
    std::unordered_map<std::string, double> out;
    for (const auto& u : units) {
        if (!responded(response, u)) continue;
        const auto& s = sums.at(cell_of.at(u));
        out[u] = weights.at(u) * (s.first / s.second);
    }
    return out;
}

}  // namespace

WeightSet nonresponse_adjust(const WeightSet& w, const SampleStructure& s, const ResponseIndicators& r) {
    WeightSet out;
    out.scaling = w.scaling;

    std::vector<std::string> schools;
    for (const auto& [id, stratum] : s.school_stratum) schools.push_back(id);
    out.school = adjust_level(w.school, schools, s.school_stratum, r.school, "school", "stratum");

    std::vector<std::string> classes;
    for (const auto& [id, school] : s.class_school) {
        if (out.school.count(school)) classes.push_back(id);
    }
    out.class_ = adjust_level(w.class_, classes, s.class_school, r.class_, "class", "school");
    for (const auto& [id, wk] : out.school) {
        bool any = false;
        for (const auto& [cid, wc] : out.class_) any = any || s.class_school.at(cid) == id;
        if (!any) throw ValidationError("no responding class in school '" + id + "'");
    }

    std::vector<std::string> students;
    for (const auto& [id, cls] : s.student_class) {
        if (out.class_.count(cls)) students.push_back(id);
    }
    out.student = adjust_level(w.student, students, s.student_class, r.student, "student", "class");
    return out;
}

}  // namespace mvmlm
