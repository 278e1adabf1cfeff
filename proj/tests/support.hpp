#pragma once

// Small simulated scenes shared by the tests.

#include "sss/dense_match.hpp"
#include "sss/simulator.hpp"

namespace sss::test {

inline SurveyPlan small_plan(int lines = 2, double length = 40.0, double spacing = 50.0)
{
    SurveyPlan p;
    p.line_count = lines;
    p.line_length = length;
    p.line_spacing = spacing;
    return p;
}

inline SeafloorParams flat_params(const SurveyPlan& plan, const SensorConfig& sensor, bool textured = false)
{
    SeafloorParams fp = floor_params_for(plan, sensor);
    fp.undulation_amplitude = 0.0;
    fp.textured = textured;
    return fp;
}

/// Rendered survey over a flat floor; speckle off unless requested.
inline Survey flat_survey(const SurveyPlan& plan, const SensorConfig& sensor, bool textured = false,
                          double speckle = 0.0)
{
    const Seafloor floor(flat_params(plan, sensor, textured));
    RenderParams rp;
    rp.speckle_variance = speckle;
    return render_survey(floor, plan, sensor, rp);
}

/// Two adjacent simulated lines, canonicalized and geo-referenced with the
/// drifted dead-reckoning poses.
struct PairScene {
    Survey survey;
    SssImage a, b;
    Mask mask_a, mask_b;
    GeoImage geo_a, geo_b;
};

inline PairScene pair_scene(double length = 40.0, double yaw_sigma = 0.02, std::uint64_t seed = 3)
{
    const SensorConfig sensor;
    const SurveyPlan plan = small_plan(2, length);
    const Seafloor floor(floor_params_for(plan, sensor));
    RenderParams rp;
    rp.seed = seed;
    PairScene s;
    s.survey = render_survey(floor, plan, sensor, rp);
    DriftModel dm;
    dm.yaw_noise_sigma = yaw_sigma;
    dm.yaw_step_pings = 10;
    dm.seed = seed;
    s.survey.pings = inject_drift(s.survey.pings, dm);
    CanonicalParams cp;
    cp.canonical_resolution = 0.5;
    auto build = [&](const ImageSpan& span, SssImage& img, Mask& mask, GeoImage& geo) {
        const std::span<const Ping> pings(s.survey.pings.data() + span.first_ping, static_cast<std::size_t>(span.size()));
        img = canonicalize(make_raw_image(pings), pings, cp);
        mask = build_mask(img, pings);
        geo = georeference(img, pings, sensor.sensor_offset);
    };
    build(s.survey.images[0], s.a, s.mask_a, s.geo_a);
    build(s.survey.images[1], s.b, s.mask_b, s.geo_b);
    return s;
}

}  // namespace sss::test
