"""Service layer: pricing oracles, simulation, networks, training and studies."""
