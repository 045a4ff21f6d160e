# advforensics Python tests
