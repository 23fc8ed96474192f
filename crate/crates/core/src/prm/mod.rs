//! Parameter files: main, model, grid, observation types and observation data.
//!
//! All five share one lexical convention: `#` starts a comment, keys are
//! case-insensitive, and `KEY = value`, `KEY == value` and `KEY value` are
//! equivalent.

mod grid;
mod lexer;
mod mainprm;
mod model;
mod obsdata;
mod obstypes;

use std::path::{Path, PathBuf};

pub use grid::{parse_grid, GridConfig, GridUsage};
pub use mainprm::{
    parse_main, parse_main_named, BadBatchSpec, ExitAction, Inflation, InflationCap, LocRad, MainConfig, Mode,
    PointLogSpec, Region, Scheme,
};
pub use model::{parse_model, ModelConfig, ModelVar, Randomise};
pub use obsdata::{obsdata_to_prm_string, parse_obsdata, ErrorStdEntry, ErrorStdOp, ErrorStdSource, ObsDataSection};
pub use obstypes::{obstypes_to_prm_string, parse_obstypes, ObsTypeSpec};

use crate::error::{Error, Result};

/// Fully loaded configuration: main file plus the four files it names.
#[derive(Debug, Clone, PartialEq)]
pub struct DaConfig {
    pub main: MainConfig,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub obstypes: Vec<ObsTypeSpec>,
    pub obsdata: Vec<ObsDataSection>,
    /// Directory relative paths are resolved against.
    pub workdir: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

impl DaConfig {
    /// Reads the main parameter file and the files it refers to. Relative
    /// paths, including `main_path` itself, are resolved against `workdir`.
    pub fn load(main_path: &Path, workdir: &Path) -> Result<Self> {
        let main_path = resolve(workdir, main_path);
        let main = parse_main_named(&read(&main_path)?, &main_path.display().to_string())?;
        let model = parse_model(&read(&resolve(workdir, &main.model_prm))?)?;
        let grids = parse_grid(&read(&resolve(workdir, &main.grid_prm))?)?;
        let obstypes = parse_obstypes(&read(&resolve(workdir, &main.obstypes_prm))?)?;
        let obsdata = parse_obsdata(&read(&resolve(workdir, &main.obs_prm))?)?;
        Self::assemble(main, model, grids, obstypes, obsdata, workdir.to_path_buf())
    }

    pub fn assemble(
        main: MainConfig,
        model: ModelConfig,
        grids: Vec<GridConfig>,
        obstypes: Vec<ObsTypeSpec>,
        obsdata: Vec<ObsDataSection>,
        workdir: PathBuf,
    ) -> Result<Self> {
        let mut grids = grids.into_iter().filter(|g| g.usage != Some(GridUsage::Prep));
        let grid = grids.next().ok_or_else(|| Error::Config("no usable grid".into()))?;
        if grids.next().is_some() {
            return Err(Error::Config("only a single model grid is supported".into()));
        }
        for v in &model.vars {
            if let Some(g) = &v.grid {
                if g != &grid.name {
                    return Err(Error::Config(format!("VAR {} refers to unknown grid \"{g}\"", v.name)));
                }
            }
        }
        for t in &obstypes {
            for v in std::iter::once(&t.var).chain(t.var2.iter()) {
                if model.var(v).is_none() {
                    return Err(Error::Config(format!("obs type {} refers to unknown model variable \"{v}\"", t.name)));
                }
            }
        }
        for s in &obsdata {
            if !obstypes.iter().any(|t| t.name == s.obstype) {
                return Err(Error::Config(format!(
                    "product {}: TYPE \"{}\" is not a declared observation type",
                    s.product, s.obstype
                )));
            }
        }
        for b in &main.badbatches {
            if !obstypes.iter().any(|t| t.name == b.obstype) {
                return Err(Error::Config(format!("BADBATCHES: unknown observation type \"{}\"", b.obstype)));
            }
        }
        Ok(DaConfig {
            main,
            model,
            grid,
            obstypes,
            obsdata,
            workdir,
        })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.workdir, p)
    }

    pub fn obstype(&self, name: &str) -> Option<&ObsTypeSpec> {
        self.obstypes.iter().find(|t| t.name == name)
    }

    pub fn obstype_index(&self, name: &str) -> Option<usize> {
        self.obstypes.iter().position(|t| t.name == name)
    }

    /// Localisation for a type: its own override, else the common setting.
    pub fn locrad_for<'a>(&'a self, obstype: &'a ObsTypeSpec) -> Option<&'a LocRad> {
        obstype.locrad.as_ref().or(self.main.locrad.as_ref())
    }

    /// Inflation for a variable: its model-file override, else the common setting.
    pub fn inflation_for(&self, var: &str) -> Inflation {
        self.model
            .var(var)
            .and_then(|v| v.inflation)
            .unwrap_or(self.main.inflation)
    }
}

/// Text printed by `--describe-prm-format`.
pub fn describe_format(kind: &str) -> Option<&'static str> {
    Some(match kind {
        "main" => concat!(
            "  Main parameter file format:\n\n",
            "    MODE            = { ENKF | ENOI }\n",
            "  [ SCHEME          = { DENKF* | ETKF } ]\n",
            "  [ ALPHA           = <alpha> ]                              (1*)\n",
            "    MODEL           = <model prm file>\n",
            "    GRID            = <grid prm file>\n",
            "    OBSTYPES        = <obs. types prm file>\n",
            "    OBS             = <obs. data prm file>\n",
            "    DATE            = <julian day of analysis> [<units>]\n",
            "    ENSDIR          = <ensemble directory>                   (MODE = ENKF)\n",
            "    BGDIR           = <background directory>                 (MODE = ENOI)\n",
            "  [ KFACTOR         = <kfactor> ]                            (NaN*)\n",
            "  [ RFACTOR         = <rfactor> ]                            (1*)\n",
            "  [ LOCRAD          = <loc. radius in km> ... ]              (no localisation*)\n",
            "  [ WEIGHT          = <weight> ... ]                         (equal*)\n",
            "  [ STRIDE          = <stride> ]                             (1*)\n",
            "  [ SOBSTRIDE       = <stride> ]                             (1*)\n",
            "  [ FIELDBUFFERSIZE = <fieldbuffersize> ]                    (1*, ignored)\n",
            "  [ INFLATION       = <inflation> [ <VALUE> | PLAIN ] ]      (1 0.5*)\n",
            "  [ ZSTATINTS       = [<z1> <z2>] ... ]\n",
            "    ...\n",
            "  [ REGION          = <name> <lon1> <lon2> <lat1> <lat2> [[<z1> <z2>] ...] ]\n",
            "    ...\n",
            "  [ POINTLOG        = <i> <j> [grid name] ]\n",
            "    ...\n",
            "  [ EXITACTION      = { BACKTRACE* | SEGFAULT } ]\n",
            "  [ BADBATCHES      = <obstype> <max. bias> <max. mad> <min # obs.> ]\n",
            "    ...\n"
        ),
        "model" => concat!(
            "  Model parameter file format:\n\n",
            "    NAME      = <name>\n\n",
            "    VAR       = <name>\n",
            "  [ GRID      = <name> ]\n",
            "  [ INFLATION = <value> [<value> | PLAIN] ]\n",
            "  [ RANDOMISE <deflation> <sigma> ]\n\n",
            "  [ <more of the above blocks> ]\n"
        ),
        "grid" => concat!(
            "  Grid parameter file format:\n\n",
            "    NAME             = <name> [ PREP | CALC ]\n",
            "    VTYPE            = z\n",
            "    DATA             = <grid data directory>\n",
            "  [ XDIMNAME         = <x dimension name> ]\n",
            "  [ YDIMNAME         = <y dimension name> ]\n",
            "  [ ZDIMNAME         = <z dimension name> ]\n",
            "    XVARNAME         = <x variable name>\n",
            "    YVARNAME         = <y variable name>\n",
            "    ZVARNAME         = <z variable name>\n",
            "    DEPTHVARNAME     = <depth variable name>\n",
            "    NUMLEVELSVARNAME = <# of levels variable name>\n"
        ),
        "obstypes" => concat!(
            "  Observation types parameter file format:\n\n",
            "    NAME      = <name>\n",
            "    VAR       = <model variable name>\n",
            "  [ VAR2      = <model variable name> ]\n",
            "    ISSURFACE = { yes | no }\n",
            "  [ OFFSET    = <file name> <variable name> ]    (none*)\n",
            "    HFUNCTION = <H function name>\n",
            "  [ ASYNC     = <time interval> ]                (synchronous*)\n",
            "  [ LOCRAD    = <locrad> ... ]                   (common*)\n",
            "  [ WEIGHT    = <weight> ... ]                   (equal*)\n",
            "  [ RFACTOR   = <rfactor> ]                      (1*)\n",
            "  [ MINVALUE  = <minimal allowed value> ]        (-inf*)\n",
            "  [ MAXVALUE  = <maximal allowed value> ]        (+inf*)\n",
            "  [ XMIN      = <minimal allowed X coordinate> ] (-inf*)\n",
            "  [ XMAX      = <maximal allowed X coordinate> ] (+inf*)\n",
            "  [ YMIN      = <minimal allowed Y coordinate> ] (-inf*)\n",
            "  [ YMAX      = <maximal allowed Y coordinate> ] (+inf*)\n",
            "  [ ZMIN      = <minimal allowed Z coordinate> ] (-inf*)\n",
            "  [ ZMAX      = <maximal allowed Z coordinate> ] (+inf*)\n\n",
            "  [ <more of the above blocks> ]\n"
        ),
        "obsdata" => concat!(
            "  Observation data parameter file format:\n\n",
            "    PRODUCT   = <product>\n",
            "    READER    = <reader>\n",
            "    TYPE      = <observation type>\n",
            "    FILE      = <data file wildcard>\n",
            "    ...\n",
            "  [ ERROR_STD = { <value> | <data file> <variable> } [ EQ* | PL | MU | MI | MA ] ]\n",
            "    ...\n",
            "  [ PARAMETER <name> = <value> ]\n",
            "    ...\n\n",
            "  [ <more of the above blocks> ]\n"
        ),
        _ => return None,
    })
}
