// acceptance suite added as modules land
