//! Routes over the junction graph: A* search, lane-level polyline assembly,
//! and the plain-text route definition format.

use crate::geom::{Polyline, Vec2};
use crate::world::map::{junction_connector, RoadMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ambient rendering condition, one of 6x6 weather/daylight pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub weather: u8,
    pub daylight: u8,
}

pub const CONDITION_LEVELS: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    CrossingPedestrian,
    RedLightRunner,
    UnprotectedTurn,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CrossingPedestrian => "crossing_pedestrian",
            ScenarioKind::RedLightRunner => "red_light_runner",
            ScenarioKind::UnprotectedTurn => "unprotected_turn",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioKind> {
        match s {
            "crossing_pedestrian" => Some(ScenarioKind::CrossingPedestrian),
            "red_light_runner" => Some(ScenarioKind::RedLightRunner),
            "unprotected_turn" => Some(ScenarioKind::UnprotectedTurn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Route {
    pub map_id: u32,
    pub junction_seq: Vec<usize>,
    pub polyline: Polyline,
    pub condition: Condition,
    pub scenarios: Vec<ScenarioKind>,
}

impl Route {
    pub fn start(&self) -> usize {
        *self.junction_seq.first().unwrap()
    }

    pub fn goal(&self) -> usize {
        *self.junction_seq.last().unwrap()
    }

    pub fn length(&self) -> f64 {
        self.polyline.length()
    }

    pub fn goal_point(&self) -> Vec2 {
        *self.polyline.pts.last().unwrap()
    }
}

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("no path between junctions {0} and {1}")]
    NoPath(usize, usize),
    #[error("junction id {0} out of range")]
    BadJunction(usize),
    #[error("route definition line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

// ── search ──

/// A* over the junction lattice with a Euclidean heuristic. Neighbor order is
/// fixed by the map, ties resolved by id, so paths are deterministic.
pub fn astar(map: &RoadMap, start: usize, goal: usize) -> Option<Vec<usize>> {
    let n = map.junctions.len();
    if start >= n || goal >= n {
        return None;
    }
    let h = |j: usize| map.junctions[j].center.dist(map.junctions[goal].center);
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    dist[start] = 0.0;
    loop {
        // Linear scan keeps the frontier ordering trivially deterministic.
        let mut cur = usize::MAX;
        let mut best = f64::INFINITY;
        for j in 0..n {
            if !closed[j] && dist[j].is_finite() {
                let f = dist[j] + h(j);
                if f < best - 1e-12 {
                    best = f;
                    cur = j;
                }
            }
        }
        if cur == usize::MAX {
            return None;
        }
        if cur == goal {
            let mut path = vec![goal];
            let mut j = goal;
            while j != start {
                j = prev[j];
                path.push(j);
            }
            path.reverse();
            return Some(path);
        }
        closed[cur] = true;
        for nb in map.neighbors(cur) {
            if closed[nb] {
                continue;
            }
            let cand = dist[cur] + map.junctions[cur].center.dist(map.junctions[nb].center);
            if cand < dist[nb] - 1e-12 {
                dist[nb] = cand;
                prev[nb] = cur;
            }
        }
    }
}

// ── assembly ──

/// Stitch lanes and junction connectors along a junction sequence. The route
/// ends at the goal junction center, so finishing means entering it.
pub fn assemble_polyline(map: &RoadMap, seq: &[usize]) -> Result<Polyline, RouteError> {
    assert!(seq.len() >= 2, "route needs at least two junctions");
    let mut pts: Vec<Vec2> = Vec::new();
    let push = |p: Vec2, pts: &mut Vec<Vec2>| {
        if pts.last().map_or(true, |q| q.dist(p) > 1e-9) {
            pts.push(p);
        }
    };
    for w in seq.windows(2) {
        let e = map
            .edge_between(w[0], w[1])
            .ok_or(RouteError::NoPath(w[0], w[1]))?;
        let lane = &map.edges[e].lane;
        if let Some(&last) = pts.last() {
            // Connector through the junction we are crossing.
            let d_in = map.edges[e].dir;
            let prev_dir = if pts.len() >= 2 {
                (last - pts[pts.len() - 2]).normalized()
            } else {
                d_in
            };
            for p in junction_connector(last, prev_dir, lane.pts[0], d_in) {
                push(p, &mut pts);
            }
        }
        for &p in &lane.pts {
            push(p, &mut pts);
        }
    }
    push(map.junctions[*seq.last().unwrap()].center, &mut pts);
    Ok(Polyline::new(pts))
}

pub fn build_route(
    map: &RoadMap,
    waypoint_junctions: &[usize],
    condition: Condition,
    scenarios: Vec<ScenarioKind>,
) -> Result<Route, RouteError> {
    for &j in waypoint_junctions {
        if j >= map.junctions.len() {
            return Err(RouteError::BadJunction(j));
        }
    }
    let mut seq: Vec<usize> = Vec::new();
    for w in waypoint_junctions.windows(2) {
        let leg = astar(map, w[0], w[1]).ok_or(RouteError::NoPath(w[0], w[1]))?;
        let skip = usize::from(!seq.is_empty());
        seq.extend(leg.into_iter().skip(skip));
    }
    let polyline = assemble_polyline(map, &seq)?;
    Ok(Route { map_id: map.id, junction_seq: seq, polyline, condition, scenarios })
}

/// The `count` longest shortest-path routes with distinct unordered endpoint
/// pairs, longest first, ties broken by (start, goal).
pub fn longest_routes(map: &RoadMap, count: usize) -> Vec<Vec<usize>> {
    let n = map.junctions.len();
    let mut cands: Vec<(f64, usize, usize, Vec<usize>)> = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a >= b {
                continue;
            }
            if let Some(seq) = astar(map, a, b) {
                let len = assemble_polyline(map, &seq).map(|p| p.length()).unwrap_or(0.0);
                cands.push((len, a, b, seq));
            }
        }
    }
    cands.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    cands.into_iter().take(count).map(|c| c.3).collect()
}

// ── text format ──

/// Parsed form of a route definition file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouteDef {
    pub map: u32,
    pub start: usize,
    pub goal: usize,
    pub via: Vec<usize>,
    pub condition: Condition,
    pub scenarios: Vec<ScenarioKind>,
}

impl RouteDef {
    pub fn junction_waypoints(&self) -> Vec<usize> {
        let mut w = vec![self.start];
        w.extend(&self.via);
        w.push(self.goal);
        w
    }
}

/// Line-oriented format: `key value...`, `#` comments, blank lines ignored.
/// Keys: map, start, goal, via, condition (weather daylight), scenario.
pub fn parse_route_def(text: &str) -> Result<RouteDef, RouteError> {
    let mut def = RouteDef::default();
    let mut saw = (false, false, false);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        let err = |msg: &str| RouteError::Parse { line: i + 1, msg: msg.to_string() };
        let next_num = |it: &mut std::str::SplitWhitespace, what: &str| {
            it.next()
                .ok_or_else(|| err(&format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|_| err(&format!("bad {what}")))
        };
        match key {
            "map" => {
                def.map = next_num(&mut it, "map id")? as u32;
                saw.0 = true;
            }
            "start" => {
                def.start = next_num(&mut it, "junction")?;
                saw.1 = true;
            }
            "goal" => {
                def.goal = next_num(&mut it, "junction")?;
                saw.2 = true;
            }
            "via" => def.via.push(next_num(&mut it, "junction")?),
            "condition" => {
                def.condition.weather = next_num(&mut it, "weather")? as u8;
                def.condition.daylight = next_num(&mut it, "daylight")? as u8;
                if def.condition.weather >= CONDITION_LEVELS
                    || def.condition.daylight >= CONDITION_LEVELS
                {
                    return Err(err("condition out of range"));
                }
            }
            "scenario" => {
                let name = it.next().ok_or_else(|| err("missing scenario name"))?;
                def.scenarios.push(
                    ScenarioKind::parse(name).ok_or_else(|| err("unknown scenario"))?,
                );
            }
            other => return Err(err(&format!("unknown key '{other}'"))),
        }
        if it.next().is_some() {
            return Err(RouteError::Parse { line: i + 1, msg: "trailing tokens".into() });
        }
    }
    if !(saw.0 && saw.1 && saw.2) {
        return Err(RouteError::Parse { line: 0, msg: "map, start and goal are required".into() });
    }
    Ok(def)
}

pub fn format_route_def(def: &RouteDef) -> String {
    let mut s = String::new();
    s.push_str(&format!("map {}\n", def.map));
    s.push_str(&format!("start {}\n", def.start));
    for v in &def.via {
        s.push_str(&format!("via {v}\n"));
    }
    s.push_str(&format!("goal {}\n", def.goal));
    s.push_str(&format!(
        "condition {} {}\n",
        def.condition.weather, def.condition.daylight
    ));
    for sc in &def.scenarios {
        s.push_str(&format!("scenario {}\n", sc.name()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn astar_finds_manhattan_paths() {
        let map = RoadMap::build(0); // 3x3
        let path = astar(&map, 0, 8).unwrap();
        assert_eq!(path.first(), Some(&0));
        assert_eq!(path.last(), Some(&8));
        assert_eq!(path.len(), 5); // 4 hops on a 3x3 lattice corner to corner
        for w in path.windows(2) {
            assert!(map.edge_between(w[0], w[1]).is_some());
        }
    }

    #[test]
    fn route_polyline_stays_on_road() {
        use crate::world::map::GroundClass;
        let map = RoadMap::build(0);
        let route = build_route(&map, &[0, 8], Condition::default(), vec![]).unwrap();
        let pl = &route.polyline;
        assert!(pl.length() > 2.0 * map.block);
        let mut s = 0.0;
        while s < pl.length() {
            let c = map.ground_class(pl.point_at(s));
            assert!(
                matches!(c, GroundClass::Road | GroundClass::LaneMarking),
                "route leaves the road at s={s}: {c:?}"
            );
            s += 0.5;
        }
        // Ends at the goal junction center.
        assert!(pl.pts.last().unwrap().dist(map.junctions[8].center) < 1e-9);
    }

    #[test]
    fn longest_routes_are_sorted_and_distinct() {
        let map = RoadMap::build(0);
        let routes = longest_routes(&map, 6);
        assert_eq!(routes.len(), 6);
        let mut lens: Vec<f64> = routes
            .iter()
            .map(|s| assemble_polyline(&map, s).unwrap().length())
            .collect();
        let sorted = {
            let mut l = lens.clone();
            l.sort_by(|a, b| b.partial_cmp(a).unwrap());
            l
        };
        assert_eq!(lens.len(), sorted.len());
        for (a, b) in lens.drain(..).zip(sorted) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn route_def_round_trip() {
        let text = "
# benchmark route
map 2
start 1
via 5
goal 10
condition 3 4
scenario crossing_pedestrian
scenario red_light_runner
";
        let def = parse_route_def(text).unwrap();
        assert_eq!(def.map, 2);
        assert_eq!(def.junction_waypoints(), vec![1, 5, 10]);
        assert_eq!(def.condition, Condition { weather: 3, daylight: 4 });
        assert_eq!(def.scenarios.len(), 2);
        let again = parse_route_def(&format_route_def(&def)).unwrap();
        assert_eq!(def, again);
    }

    #[test]
    fn route_def_errors() {
        assert!(matches!(parse_route_def("map 0\nstart 0"), Err(RouteError::Parse { .. })));
        assert!(matches!(
            parse_route_def("map 0\nstart 0\ngoal 1\nfrobnicate 3"),
            Err(RouteError::Parse { .. })
        ));
        assert!(matches!(
            parse_route_def("map 0\nstart 0\ngoal 1\ncondition 9 0"),
            Err(RouteError::Parse { .. })
        ));
    }
}
