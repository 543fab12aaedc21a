//! Reproduce one of the shipped figures end to end: runs the underlying
//! experiments, writes per-panel CSVs, and renders a multi-panel SVG.
//!
//! Pass a figure id (fig1, fig2cd, fig4, fig5, fig6, fig7) as the first
//! argument; defaults to fig2cd, the cheapest bundle. fig1 and fig5 need the
//! bundled MNIST subset and take minutes.

use ntk_align::harness::{self, FigureId};

fn main() {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "fig2cd".into());
    let figure: FigureId = arg.parse().unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1);
    });

    let mut config = harness::canonical_figure_config(figure);
    config.output_dir = std::env::temp_dir()
        .join(format!("ntk_align_example_{figure}"))
        .to_string_lossy()
        .into_owned();

    println!("reproducing {figure} into {}", config.output_dir);
    let bundle = harness::run_figure_repro(figure, &config).expect("figure reproduction");

    println!("\npanel data:");
    for path in &bundle.csv_paths {
        println!("  {}", path.display());
    }
    println!("figure: {}", bundle.svg_path.display());
    for note in &bundle.notes {
        println!("note: {note}");
    }
}
