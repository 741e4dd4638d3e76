def multiprocess_init(l, db_file, data, train_config):
    """Pool initializer for grid search workers"""
    global leaderboard_write_lock, leaderboard_db_file, dataset, config
    leaderboard_write_lock = l
    leaderboard_db_file = db_file
    dataset = data
    config = train_config
