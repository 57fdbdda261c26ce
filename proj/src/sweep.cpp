#include "attnseg/train.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace attnseg {

namespace fs = std::filesystem;

namespace {

std::string ratio_tag(double r)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "ratio_%.2f", r);
    return buf;
}

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::vector<SweepRow> sensitivity_sweep(const Dataset& train, const Dataset& val, const RunConfig& base,
                                        const std::vector<double>& ratios, const fs::path& out, bool verbose)
{
    std::vector<SweepRow> rows;
    for (double r : ratios) {
        SweepRow row;
        row.ratio = r;
        try {
            RunConfig cfg = base;
            cfg.train.mask_ratio = r;
            const fs::path cell = out.empty() ? fs::path{} : out / ratio_tag(r);
            if (!cell.empty()) cfg.out = cell.string();
            FitOptions fo;
            fo.verbose = verbose;
            const auto res = fit(train, &val, cfg, cell, std::move(fo));
            row.pixel_accuracy = res.final_eval.pixel_accuracy;
            row.miou = res.final_eval.miou;
            row.f1 = res.final_eval.f1;
            row.frac_heads_pruned = res.frac_heads_pruned;
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
            std::cerr << "sweep: ratio " << r << " failed: " << e.what() << '\n';
        }
        rows.push_back(std::move(row));
    }
    if (!out.empty()) {
        fs::create_directories(out);
        write_sweep_csv(rows, out / "sweep.csv");
        write_sweep_plot(rows, out / "sweep.png");
    }
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path)
{
    std::ofstream csv(path, std::ios::binary);
    if (!csv) throw InputError("cannot write " + path.string());
    csv << "ratio,pixel_accuracy,miou,f1,frac_heads_pruned\n";
    for (const auto& r : rows) {
        if (r.ok) {
            csv << fmt(r.ratio) << ',' << fmt(r.pixel_accuracy) << ',' << fmt(r.miou) << ',' << fmt(r.f1) << ','
                << fmt(r.frac_heads_pruned) << '\n';
        } else {
            csv << fmt(r.ratio) << ",nan,nan,nan,nan\n";
        }
    }
}

void write_sweep_plot(const std::vector<SweepRow>& rows, const fs::path& path)
{
    constexpr int width = 640, height = 420, left = 70, right = 30, top = 40, bottom = 60;
    cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    const cv::Scalar axis(40, 40, 40), grid(220, 220, 220);
    const int pw = width - left - right;
    const int ph = height - top - bottom;
    auto to_px = [&](double x, double y) {
        return cv::Point(left + static_cast<int>(std::lround(x * pw)), top + static_cast<int>(std::lround((1.0 - y) * ph)));
    };
    for (int i = 0; i <= 5; ++i) {
        const double t = i / 5.0;
        cv::line(img, to_px(0, t), to_px(1, t), grid, 1);
        cv::putText(img, fmt(t).substr(0, 3), to_px(0, t) + cv::Point(-40, 5), cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1,
                    cv::LINE_AA);
        cv::putText(img, fmt(t * 100).substr(0, t == 1.0 ? 3 : 2) + "%", to_px(t, 0) + cv::Point(-12, 20),
                    cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1, cv::LINE_AA);
    }
    cv::rectangle(img, to_px(0, 1), to_px(1, 0), axis, 1);
    cv::putText(img, "masking ratio", cv::Point(left + pw / 2 - 50, height - 15), cv::FONT_HERSHEY_SIMPLEX, 0.5, axis,
                1, cv::LINE_AA);

    struct Series {
        double SweepRow::*field;
        cv::Scalar color;
        const char* name;
    };
    const Series series[] = {{&SweepRow::pixel_accuracy, cv::Scalar(200, 90, 30), "pixel accuracy"},
                             {&SweepRow::miou, cv::Scalar(40, 40, 210), "mIoU"}};
    int legend_y = top - 15;
    int legend_x = left;
    for (const auto& s : series) {
        std::vector<cv::Point> pts;
        for (const auto& r : rows) {
            if (r.ok) pts.push_back(to_px(std::clamp(r.ratio, 0.0, 1.0), std::clamp(r.*s.field, 0.0, 1.0)));
        }
        if (pts.size() > 1) cv::polylines(img, pts, false, s.color, 2, cv::LINE_AA);
        for (const auto& p : pts) cv::circle(img, p, 4, s.color, cv::FILLED, cv::LINE_AA);
        cv::line(img, cv::Point(legend_x, legend_y), cv::Point(legend_x + 20, legend_y), s.color, 2);
        cv::putText(img, s.name, cv::Point(legend_x + 26, legend_y + 5), cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1,
                    cv::LINE_AA);
        legend_x += 170;
    }
    if (!cv::imwrite(path.string(), img)) throw InputError("cannot write " + path.string());
}

}  // namespace attnseg
