#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "arb/format.hpp"
#include "arb/pipeline.hpp"

namespace arb {

namespace fs = std::filesystem;

void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t failed_at = n;
    std::exception_ptr error;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                // keep the lowest failing index so the reported error is stable
                if (i < failed_at) {
                    failed_at = i;
                    error = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

bool Report::ok() const {
    return std::all_of(checks.begin(), checks.end(), [](const InvariantCheck& c) { return c.passed; });
}

Json strip_timing(const Json& report) {
    Json out = report;
    if (out.is_object()) out.erase("timing");
    return out;
}

void write_json_file(const fs::path& path, const Json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << doc.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

namespace {

struct MeanStd {
    double mean = 0.0;
    double sd = 0.0;
};

// Population standard deviation.
MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd m;
    if (xs.empty()) return m;
    for (double x : xs) m.mean += x;
    m.mean /= static_cast<double>(xs.size());
    for (double x : xs) m.sd += (x - m.mean) * (x - m.mean);
    m.sd = std::sqrt(m.sd / static_cast<double>(xs.size()));
    return m;
}

}  // namespace

void write_plot_csv(std::ostream& os, const TrajectorySet& set) {
    os << kPlotCsvHeader << '\n';
    if (set.traces.empty()) return;
    const int L = set.traces.front().second.layers();
    for (const auto& [id, tr] : set.traces)
        for (int l = 0; l < tr.layers(); ++l)
            os << "trace," << id << ',' << l + 1 << ',' << fmt_num(tr.logit_v[static_cast<std::size_t>(l)]) << ','
               << fmt_num(tr.logit_p[static_cast<std::size_t>(l)]) << ",,\n";
    for (int l = 0; l < L; ++l) {
        std::vector<double> v, p;
        for (const auto& [id, tr] : set.traces) {
            v.push_back(tr.logit_v[static_cast<std::size_t>(l)]);
            p.push_back(tr.logit_p[static_cast<std::size_t>(l)]);
        }
        const MeanStd mv = mean_std(v), mp = mean_std(p);
        os << "mean,," << l + 1 << ',' << fmt_num(mv.mean) << ',' << fmt_num(mp.mean) << ',' << fmt_num(mv.sd) << ','
           << fmt_num(mp.sd) << '\n';
    }
}

void write_grid_csv(std::ostream& os, const GridSet& set) {
    os << kGridCsvHeader << '\n';
    if (set.samples.empty()) return;
    const std::size_t k = set.samples.front().size();
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> l2, cosine;
        for (const auto& s : set.samples) {
            l2.push_back(s[i].l2);
            cosine.push_back(s[i].cosine);
        }
        const MeanStd m = mean_std(l2);
        const GridPoint& g = set.samples.front()[i];
        os << fmt_num(g.fraction) << ',' << g.layer << ',' << fmt_num(m.mean) << ',' << fmt_num(m.sd) << ','
           << fmt_num(mean_std(cosine).mean) << ',' << set.samples.size() << '\n';
    }
}

void emit_plot_data(const fs::path& dir, const std::vector<TrajectorySet>& trajectories,
                    const std::vector<GridSet>& grids) {
    fs::create_directories(dir);
    for (const auto& set : trajectories) {
        std::ofstream out(dir / (set.scenario + "_logits.csv"));
        write_plot_csv(out, set);
    }
    for (const auto& set : grids) {
        std::ofstream out(dir / (set.scenario + "_depth_grid.csv"));
        write_grid_csv(out, set);
    }
}

}  // namespace arb
