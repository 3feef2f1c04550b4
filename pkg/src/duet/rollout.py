"""Episode state shared by training rollouts and inference."""

from __future__ import annotations

from .envsim import observation
from .topomap import TopoMap, encoded_from_arrays, update_map


class Rollout:
    """Agent state for one episode: instruction encoding, map, executed walk.

    With ``model=None`` the map is built from raw features (for scripted
    policies that never score actions).

    ``observe`` is called for every node the agent physically reaches, so
    nodes traversed along a planned route are added to the map as well.
    """

    def __init__(self, model, env, episode, tokens=None):
        self.model = model
        self.env = env
        self.episode = episode
        cfg = model.config if model is not None else None
        self.tmap = TopoMap(d_max=cfg.d_max, distance_mode=cfg.distance_mode) if cfg else TopoMap()
        self.text = None if model is None else model.encode_text(episode.instruction if tokens is None else tokens)
        self._encoded = {}
        self.t = 0
        self.path = []
        self.observe(episode.start_node)

    @property
    def current(self):
        return self.tmap.current

    def encode(self, node):
        if node not in self._encoded:
            pano = observation(self.env, node)
            if self.model is None:
                views, objects = pano.view_feats, pano.obj_feats
            else:
                views, objects = self.model.encode_panorama(pano)
            self._encoded[node] = encoded_from_arrays(self.env, node, views, objects)
        return self._encoded[node]

    def observe(self, node):
        self.t += 1
        update_map(self.tmap, self.t, node, self.encode(node))
        self.path.append(node)

    def move_to(self, target):
        """Walk the map's shortest route to ``target``; returns the route."""
        route = self.tmap.route(self.tmap.current, target)
        for u in route[1:]:
            self.observe(u)
        return route

    def scores(self, fusion=None, use_gasa=None):
        return self.model.step(self.text, self.tmap, fusion=fusion, use_gasa=use_gasa)
