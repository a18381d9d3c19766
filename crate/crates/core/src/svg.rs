//! UV-domain layout drawings.

use std::fmt::Write as _;

use crate::error::Result;
use crate::geometry::BSplineSurface;
use crate::layout::{active_sensors, sensor_lengths, SensorLayout, ACTIVE_THRESHOLD};

const STROKE: f64 = 0.006;

fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

/// Draws the layout in the unit square: active sensors solid with index
/// labels, inactive sensors dashed, and a legend below the square with the
/// active count and the occupancy-weighted total length on `surface`.
pub fn layout_svg(
    layout: &SensorLayout,
    surface: &BSplineSurface,
    samples: usize,
) -> Result<String> {
    layout.validate()?;
    let active = active_sensors(layout, ACTIVE_THRESHOLD);
    let occupancy = layout.occupancy();
    let lengths = sensor_lengths(surface, layout, samples)?;
    let total: f64 = occupancy.iter().zip(&lengths).map(|(h, l)| h * l).sum();

    let mut out = String::new();
    out.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1.12\" width=\"600\" height=\"672\">\n",
    );
    out.push_str(
        "<rect x=\"0\" y=\"0\" width=\"1\" height=\"1\" fill=\"white\" stroke=\"black\" stroke-width=\"0.004\"/>\n",
    );
    for (k, s) in layout.sensors.iter().enumerate() {
        let is_active = active.binary_search(&k).is_ok();
        let style = if is_active {
            format!("stroke=\"black\" stroke-width=\"{}\"", num(STROKE))
        } else {
            format!(
                "stroke=\"gray\" stroke-width=\"{}\" stroke-dasharray=\"0.02 0.015\"",
                num(STROKE / 2.0)
            )
        };
        let _ = writeln!(
            out,
            "<line id=\"s{k}\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" {style}/>",
            num(s.u_s),
            num(s.v_s),
            num(s.u_e),
            num(s.v_e)
        );
        if is_active {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-size=\"0.03\" text-anchor=\"middle\">{k}</text>",
                num(0.5 * (s.u_s + s.u_e)),
                num(0.5 * (s.v_s + s.v_e))
            );
        }
    }
    let _ = writeln!(
        out,
        "<text x=\"0.02\" y=\"1.07\" font-size=\"0.04\">active: {}</text>",
        active.len()
    );
    let _ = writeln!(
        out,
        "<text x=\"0.98\" y=\"1.07\" font-size=\"0.04\" text-anchor=\"end\">total length: {} mm</text>",
        format_args!("{total:.1}")
    );
    out.push_str("</svg>\n");
    Ok(out)
}
