"""scenekin: build articulation models of indoor scenes through simulated interaction.

The package couples a procedural room simulator with a perception pipeline:
probe the scene at predicted interaction hotspots, observe the motion each
pull produces, and fit prismatic/revolute joint models from the before/after
point clouds. Entry points live in :mod:`scenekin.cli`.
"""

__version__ = "0.1.0"
